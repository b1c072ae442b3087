//! The space of timelike geodesic loops: shooting for loops, continuation
//! along base-point paths, and sampled length bounds over a class.
//!
//! A loop is identified with its initial velocity `v` on the affine parameter
//! interval `[0, 1]`; it closes up when `exp(v)` equals the image of its base
//! point under the class's deck element.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geodesic::{integrate_geodesic, variational_flow, DEFAULT_TOL};
use crate::manifold::{aux_norm, DeckElement, SpacetimeModel, TangentVec};

/// Condition number beyond which a failed shooting step is blamed on the Jacobian.
pub const SINGULAR_COND: f64 = 1e12;
const MIN_DAMPING: f64 = 1e-12;
const SVD_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveOptions {
    pub tol_integ: f64,
    pub tol_solve: f64,
    pub max_iter: usize,
    pub free_base: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol_integ: DEFAULT_TOL,
            tol_solve: 1e-10,
            max_iter: 50,
            free_base: false,
        }
    }
}

/// A timelike geodesic loop with its closing diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct LoopCandidate {
    pub v: TangentVec,
    pub deck: DeckElement,
    pub residual: Vec<f64>,
    pub residual_norm: f64,
    pub length: f64,
    pub closure_defect: f64,
    pub iterations: usize,
}

impl LoopCandidate {
    /// Evaluates the diagnostics of `v` in the class of `deck`.
    pub fn evaluate(model: &SpacetimeModel, v: &TangentVec, deck: &DeckElement, tol: f64) -> Result<Self> {
        let st = shoot(model, v, deck, tol)?;
        Ok(st.into_candidate(model, v.clone(), deck.clone(), 0))
    }

    pub fn base(&self) -> &[f64] {
        &self.v.base
    }
}

struct Shot {
    residual: Vec<f64>,
    norm: f64,
    end_vel: Vec<f64>,
    phi: DMatrix<f64>,
}

impl Shot {
    fn into_candidate(self, model: &SpacetimeModel, v: TangentVec, deck: DeckElement, iterations: usize) -> LoopCandidate {
        let length = model.norm(&v);
        let pushed = deck.push(&v.comp);
        let diff: Vec<f64> = self.end_vel.iter().zip(&pushed).map(|(a, b)| a - b).collect();
        LoopCandidate {
            closure_defect: aux_norm(&diff),
            residual: self.residual,
            residual_norm: self.norm,
            length,
            v,
            deck,
            iterations,
        }
    }
}

fn shoot(model: &SpacetimeModel, v: &TangentVec, deck: &DeckElement, tol: f64) -> Result<Shot> {
    model.check_tangent(v)?;
    let (x1, xd1, phi) = variational_flow(model, v, 1.0, tol)?.end();
    let residual = model.chart_delta(&x1, &deck.apply(&v.base));
    Ok(Shot {
        norm: aux_norm(&residual),
        residual,
        end_vel: xd1,
        phi,
    })
}

/// `exp(v) − deck(π(v))` in chart coordinates, with its auxiliary norm.
pub fn loop_residual(model: &SpacetimeModel, v: &TangentVec, deck: &DeckElement, tol: f64) -> Result<(Vec<f64>, f64)> {
    let x1 = integrate_geodesic(model, v, 1.0, tol)?.endpoint();
    let r = model.chart_delta(&x1, &deck.apply(&v.base));
    let norm = aux_norm(&r);
    Ok((r, norm))
}

/// Min-norm least-squares solution of `J x = rhs` with relative SVD cutoff;
/// also returns the condition number of `J`.
pub(crate) fn pinv_solve(j: &DMatrix<f64>, rhs: &DVector<f64>) -> (DVector<f64>, f64) {
    damped_solve(j, rhs, 0.0)
}

/// `(JᵀJ + μ I)⁻¹ Jᵀ rhs` via SVD filter factors; `μ = 0` is the pseudo-inverse.
fn damped_solve(j: &DMatrix<f64>, rhs: &DVector<f64>, mu: f64) -> (DVector<f64>, f64) {
    let svd = j.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut x = DVector::zeros(j.ncols());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > SVD_CUTOFF * smax && s > 0.0 {
            let coef = u.column(k).dot(rhs) * s / (s * s + mu);
            x += vt.row(k).transpose() * coef;
        }
    }
    (x, cond)
}

fn shooting_jacobian(phi: &DMatrix<f64>, deck: &DeckElement, n: usize, free_base: bool) -> DMatrix<f64> {
    let phi_xv = phi.view((0, n), (n, n));
    if !free_base {
        return phi_xv.into_owned();
    }
    let mut j = DMatrix::zeros(n, 2 * n);
    j.view_mut((0, 0), (n, n))
        .copy_from(&(phi.view((0, 0), (n, n)) - deck.matrix()));
    j.view_mut((0, n), (n, n)).copy_from(&phi_xv);
    j
}

/// Levenberg–Marquardt shooting for a loop in the class of `deck`, with
/// damping proportional to the residual and a backtracking line search.
pub fn find_loop(model: &SpacetimeModel, seed: &TangentVec, deck: &DeckElement, opts: &SolveOptions) -> Result<LoopCandidate> {
    if !(opts.tol_solve >= 1e-12 && opts.tol_solve.is_finite()) {
        return Err(Error::config(format!("solver tolerance must be at least 1e-12, got {}", opts.tol_solve)));
    }
    let n = model.dim();
    if !model.classify(seed)?.is_timelike() {
        return Err(Error::Precondition("loop seed must be timelike".into()));
    }
    let mut v = seed.clone();
    let mut shot = shoot(model, &v, deck, opts.tol_integ)?;
    for it in 0..opts.max_iter {
        if shot.norm < opts.tol_solve {
            return finish(model, v, deck, shot, it);
        }
        let j = shooting_jacobian(&shot.phi, deck, n, opts.free_base);
        let r = DVector::from_column_slice(&shot.residual);
        let mu = shot.norm * j.norm();
        let (step, cond) = damped_solve(&j, &(-r), mu);
        let mut lambda = 1.0;
        let mut accepted = None;
        while lambda >= MIN_DAMPING {
            let trial = apply_step(&v, &step, lambda, n, opts.free_base);
            if model.classify(&trial).map(|c| c.is_timelike()).unwrap_or(false) {
                if let Ok(s) = shoot(model, &trial, deck, opts.tol_integ) {
                    if s.norm < shot.norm {
                        accepted = Some((trial, s));
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((trial, s)) => {
                debug!("shoot it={it} lambda={lambda:e} residual={:e}", s.norm);
                v = trial;
                shot = s;
            }
            None if cond > SINGULAR_COND => {
                return Err(Error::SingularJacobian {
                    cond,
                    base: v.base.clone(),
                })
            }
            None => {
                return Err(Error::NoConvergence {
                    iterations: it,
                    residual: shot.norm,
                    best_base: v.base.clone(),
                    best_comp: v.comp.clone(),
                })
            }
        }
    }
    if shot.norm < opts.tol_solve {
        return finish(model, v, deck, shot, opts.max_iter);
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual: shot.norm,
        best_base: v.base.clone(),
        best_comp: v.comp.clone(),
    })
}

fn apply_step(v: &TangentVec, step: &DVector<f64>, lambda: f64, n: usize, free_base: bool) -> TangentVec {
    let mut out = v.clone();
    if free_base {
        for i in 0..n {
            out.base[i] += lambda * step[i];
            out.comp[i] += lambda * step[n + i];
        }
    } else {
        for i in 0..n {
            out.comp[i] += lambda * step[i];
        }
    }
    out
}

fn finish(model: &SpacetimeModel, v: TangentVec, deck: &DeckElement, shot: Shot, it: usize) -> Result<LoopCandidate> {
    if !model.classify(&v)?.is_timelike() {
        return Err(Error::NoConvergence {
            iterations: it,
            residual: shot.norm,
            best_base: v.base.clone(),
            best_comp: v.comp.clone(),
        });
    }
    Ok(shot.into_candidate(model, v, deck.clone(), it))
}

/// Tries every loop class of the model in turn.
pub fn find_any_loop(model: &SpacetimeModel, seed: &TangentVec, opts: &SolveOptions) -> Result<LoopCandidate> {
    let classes = model.loop_classes();
    if classes.is_empty() {
        return Err(Error::config("no loop class available"));
    }
    let mut last = None;
    for deck in &classes {
        match find_loop(model, seed, deck, opts) {
            Ok(lp) => return Ok(lp),
            Err(e) => {
                debug!("class {} failed: {e}", deck.label);
                last = Some(e);
            }
        }
    }
    Err(last.unwrap())
}

/// Base-point path for continuation.
#[derive(Debug, Clone)]
pub enum BasePath {
    /// Straight chart segment from the start base to the target.
    Segment(Vec<f64>),
    /// Explicit sequence of bases following the start base.
    Points(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize)]
pub struct PathAbort {
    pub node: usize,
    pub base: Vec<f64>,
    pub reason: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, Serialize)]
pub struct HomotopyPath {
    pub nodes: Vec<LoopCandidate>,
    pub base_curve: Vec<Vec<f64>>,
    pub continuous: bool,
    pub max_jump: f64,
    pub abort: Option<PathAbort>,
}

impl HomotopyPath {
    pub fn completed(&self) -> bool {
        self.abort.is_none()
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.length).collect()
    }
}

/// Predictor–corrector continuation of `start` while its base follows `path`.
/// Solver failures stop the path and are recorded in `abort`.
pub fn continuation_path(
    model: &SpacetimeModel,
    start: &LoopCandidate,
    path: &BasePath,
    steps: usize,
    opts: &SolveOptions,
) -> Result<HomotopyPath> {
    let n = model.dim();
    let bases: Vec<Vec<f64>> = match path {
        BasePath::Segment(target) => {
            if target.len() != n {
                return Err(Error::config(format!("target must have {n} coordinates")));
            }
            let steps = steps.max(1);
            let p0 = start.base();
            (1..=steps)
                .map(|k| {
                    let s = k as f64 / steps as f64;
                    p0.iter().zip(target).map(|(a, b)| a + s * (b - a)).collect()
                })
                .collect()
        }
        BasePath::Points(pts) => pts.clone(),
    };
    let fixed = SolveOptions {
        free_base: false,
        ..*opts
    };
    let mut nodes = vec![start.clone()];
    let mut base_curve = vec![start.base().to_vec()];
    let mut continuous = true;
    let mut max_jump: f64 = 0.0;
    let mut abort = None;
    for (k, q) in bases.iter().enumerate() {
        let prev = nodes.last().unwrap();
        let dp: Vec<f64> = q.iter().zip(prev.base()).map(|(a, b)| a - b).collect();
        let seed = match predict(model, prev, q, &dp, opts.tol_integ) {
            Ok(s) => s,
            Err(e) => {
                abort = Some(abort_record(k + 1, q, &e));
                break;
            }
        };
        match find_loop(model, &seed, &prev.deck, &fixed) {
            Ok(lp) => {
                let jump = aux_norm(
                    &lp.v
                        .base
                        .iter()
                        .chain(&lp.v.comp)
                        .zip(prev.v.base.iter().chain(&prev.v.comp))
                        .map(|(a, b)| a - b)
                        .collect::<Vec<_>>(),
                );
                let bound = 10.0 * aux_norm(&dp) * (1.0 + aux_norm(&prev.v.comp));
                if jump > bound {
                    continuous = false;
                }
                max_jump = max_jump.max(jump);
                base_curve.push(lp.v.base.clone());
                nodes.push(lp);
            }
            Err(e) => {
                warn!("continuation stopped at node {}: {e}", k + 1);
                abort = Some(abort_record(k + 1, q, &e));
                break;
            }
        }
    }
    Ok(HomotopyPath {
        nodes,
        base_curve,
        continuous,
        max_jump,
        abort,
    })
}

fn abort_record(node: usize, base: &[f64], e: &Error) -> PathAbort {
    PathAbort {
        node,
        base: base.to_vec(),
        reason: e.to_string(),
        exit_code: e.exit_code(),
    }
}

/// Tangent predictor `dv = −Φ_xv⁺ (Φ_xx − A) dp`.
fn predict(model: &SpacetimeModel, prev: &LoopCandidate, q: &[f64], dp: &[f64], tol: f64) -> Result<TangentVec> {
    let n = model.dim();
    let (_, _, phi) = variational_flow(model, &prev.v, 1.0, tol)?.end();
    let a = prev.deck.matrix();
    let rhs = -((phi.view((0, 0), (n, n)) - a) * DVector::from_column_slice(dp));
    let (dv, _) = pinv_solve(&phi.view((0, n), (n, n)).into_owned(), &rhs);
    let predicted = TangentVec::new(
        q.to_vec(),
        prev.v.comp.iter().zip(dv.iter()).map(|(c, d)| c + d).collect::<Vec<_>>(),
    );
    let bound = 10.0 * aux_norm(dp) * (1.0 + aux_norm(&prev.v.comp));
    let timelike = model.classify(&predicted).map(|c| c.is_timelike()).unwrap_or(false);
    if dv.iter().all(|d| d.is_finite()) && dv.norm() <= bound && timelike {
        Ok(predicted)
    } else {
        debug!("predictor step {:.3e} rejected; reusing previous velocity", dv.norm());
        Ok(TangentVec::new(q.to_vec(), prev.v.comp.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sampler {
    pub n_samples: usize,
    pub radius: f64,
    pub steps: usize,
}

/// Sampled length extremes over a class; never certified.
#[derive(Debug, Clone, Serialize)]
pub struct LengthBounds {
    pub l_est: f64,
    pub big_l_est: f64,
    pub argmin: LoopCandidate,
    pub argmax: LoopCandidate,
    pub visited: usize,
    pub failures: usize,
    pub estimated: bool,
}

/// Random base-point walks from `start`; each sample continues the loop to
/// a target drawn uniformly from the chart ball of `radius` about its base.
pub fn class_length_bounds(
    model: &SpacetimeModel,
    start: &LoopCandidate,
    sampler: &Sampler,
    seed: u64,
    opts: &SolveOptions,
) -> Result<LengthBounds> {
    if !(sampler.radius > 0.0 && sampler.radius.is_finite()) {
        return Err(Error::config("sampler radius must be positive"));
    }
    let n = model.dim();
    let walks: Vec<Result<HomotopyPath>> = (0..sampler.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let dir = loop {
                let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if aux_norm(&d) <= 1.0 {
                    break d;
                }
            };
            let target: Vec<f64> = start
                .base()
                .iter()
                .zip(&dir)
                .map(|(p, d)| p + sampler.radius * d)
                .collect();
            continuation_path(model, start, &BasePath::Segment(target), sampler.steps, opts)
        })
        .collect();

    let mut argmin = start.clone();
    let mut argmax = start.clone();
    let mut visited = 1;
    let mut failures = 0;
    for w in walks {
        match w {
            Ok(path) => {
                if path.abort.is_some() {
                    failures += 1;
                }
                for node in path.nodes.iter().skip(1) {
                    visited += 1;
                    if node.length < argmin.length {
                        argmin = node.clone();
                    }
                    if node.length > argmax.length {
                        argmax = node.clone();
                    }
                }
            }
            Err(e) => {
                warn!("sample walk failed: {e}");
                failures += 1;
            }
        }
    }
    if failures > 0 {
        warn!("{failures} of {} sample walks stopped early", sampler.n_samples);
    }
    Ok(LengthBounds {
        l_est: argmin.length,
        big_l_est: argmax.length,
        argmin,
        argmax,
        visited,
        failures,
        estimated: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::WarpProfile;
    use std::f64::consts::PI;

    fn opts() -> SolveOptions {
        SolveOptions::default()
    }

    #[test]
    fn cylinder_residual_examples() {
        let m = SpacetimeModel::cylinder(1.0);
        let t = m.deck_element("T").unwrap();
        let (_, norm) = loop_residual(&m, &TangentVec::new([0.0, 0.0], [1.0, 0.0]), &t, 1e-10).unwrap();
        assert!(norm < 1e-14);
        let (r, norm) = loop_residual(&m, &TangentVec::new([0.0, 0.0], [1.0, 0.1]), &t, 1e-10).unwrap();
        assert!(r[0].abs() < 1e-14 && (r[1] - 0.1).abs() < 1e-14);
        assert!((norm - 0.1).abs() < 1e-14);
    }

    #[test]
    fn ads2_circle_residual() {
        let m = SpacetimeModel::ads2();
        let id = DeckElement::identity(2);
        let (_, norm) = loop_residual(&m, &TangentVec::new([0.0, 0.0], [2.0 * PI, 0.0]), &id, 1e-10).unwrap();
        assert!(norm < 1e-6);
    }

    #[test]
    fn cylinder_find_loop() {
        let m = SpacetimeModel::cylinder(1.0);
        let t = m.deck_element("T").unwrap();
        let lp = find_loop(&m, &TangentVec::new([0.0, 0.0], [0.9, 0.05]), &t, &opts()).unwrap();
        assert!((lp.v.comp[0] - 1.0).abs() < 1e-10 && lp.v.comp[1].abs() < 1e-10);
        assert!((lp.length - 1.0).abs() < 1e-10);
        assert!(lp.closure_defect < 1e-10);
    }

    #[test]
    fn warped_find_loop() {
        let m = SpacetimeModel::warped_cylinder(WarpProfile::Cosh, 1.0);
        let t = m.deck_element("T").unwrap();
        let lp = find_loop(&m, &TangentVec::new([0.0, 0.4], [1.05, 0.1]), &t, &opts()).unwrap();
        assert!(lp.residual_norm < 1e-10);
        assert!(lp.closure_defect > 1e-3);
    }

    #[test]
    fn ads2_find_loop() {
        let m = SpacetimeModel::ads2();
        let seed = TangentVec::new([0.0, 0.0], [1.05 * 2.0 * PI, 1e-2]);
        let lp = find_loop(&m, &seed, &DeckElement::identity(2), &opts()).unwrap();
        assert!((lp.length - 2.0 * PI).abs() < 1e-6, "{}", lp.length);
    }

    #[test]
    fn spacelike_seed_rejected() {
        let m = SpacetimeModel::cylinder(1.0);
        let t = m.deck_element("T").unwrap();
        assert!(matches!(
            find_loop(&m, &TangentVec::new([0.0, 0.0], [0.1, 1.0]), &t, &opts()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn minkowski_has_no_class() {
        let m = SpacetimeModel::minkowski(2);
        let e = find_any_loop(&m, &TangentVec::new([0.0, 0.0], [1.0, 0.0]), &opts()).unwrap_err();
        assert_eq!(e.to_string(), "configuration error: no loop class available");
    }

    #[test]
    fn cylinder_continuation_constant() {
        let m = SpacetimeModel::cylinder(1.0);
        let t = m.deck_element("T").unwrap();
        let start = find_loop(&m, &TangentVec::new([0.0, 0.0], [1.0, 0.0]), &t, &opts()).unwrap();
        let path = continuation_path(&m, &start, &BasePath::Segment(vec![0.0, 0.7]), 8, &opts()).unwrap();
        assert!(path.completed() && path.continuous);
        assert_eq!(path.nodes.len(), 9);
        for node in &path.nodes {
            assert!((node.length - 1.0).abs() < 1e-12);
            assert_eq!(node.deck.label, "T");
        }
    }

    #[test]
    fn warped_continuation_reaches_circle() {
        let m = SpacetimeModel::warped_cylinder(WarpProfile::Cosh, 1.0);
        let t = m.deck_element("T").unwrap();
        let start = find_loop(&m, &TangentVec::new([0.0, 0.4], [1.05, 0.1]), &t, &opts()).unwrap();
        let path = continuation_path(&m, &start, &BasePath::Segment(vec![0.0, 0.0]), 32, &opts()).unwrap();
        assert!(path.completed());
        let xs: Vec<f64> = path.base_curve.iter().map(|b| b[1]).collect();
        assert!(xs.windows(2).all(|w| w[1] <= w[0]));
        assert!(path.nodes.last().unwrap().closure_defect < 1e-6);
    }

    #[test]
    fn class_bounds_deterministic() {
        let m = SpacetimeModel::cylinder(1.0);
        let t = m.deck_element("T").unwrap();
        let start = find_loop(&m, &TangentVec::new([0.0, 0.0], [1.0, 0.0]), &t, &opts()).unwrap();
        let s = Sampler {
            n_samples: 6,
            radius: 0.5,
            steps: 3,
        };
        let a = class_length_bounds(&m, &start, &s, 7, &opts()).unwrap();
        let b = class_length_bounds(&m, &start, &s, 7, &opts()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!((a.l_est - 1.0).abs() < 1e-9 && (a.big_l_est - 1.0).abs() < 1e-9);
    }
}
