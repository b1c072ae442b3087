//! Length stretching and shortening of timelike geodesic loops within their
//! class, and a driver that climbs to a closed timelike geodesic.
//!
//! A loop `γ` of length `l` (unit speed, base `p`) is re-based at `q = γ(δ)`.
//! The map `t ↦ ξ(t) = (exp_q)⁻¹(deck(α(t)))`, with `α` the geodesic through
//! `p` tangent to `γ`, is tracked by Newton continuation; `ξ(δ)` is the new loop.
//! Its length is `l − δ + ∫₀^δ ṙ`, where `r = |ξ|` and
//! `|ṙ| = √(1 + |∂f/∂t|²)`.

use std::io::Write;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{arclength_point, integrate_geodesic, variational_flow, GeodesicSegment};
use crate::jacobi::{is_self_conjugate, SELF_CONJUGATE_TOL};
use crate::loopspace::{find_loop, pinv_solve, LoopCandidate, SolveOptions};
use crate::manifold::{aux_norm, SpacetimeModel, TangentVec};

/// Simpson intervals on `[0, δ]`.
pub const ETA_INTERVALS: usize = 16;
const NEWTON_MAX: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Stretch,
    Shorten,
    Auto,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Shorten => -1.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ClosedGeodesic,
    SelfConjugateAbort,
    ChartBoundaryAbort,
    BudgetExhausted,
}

/// Samples of the radial decomposition of `t ↦ ξ(t)` about `q`.
#[derive(Debug, Clone, Serialize)]
pub struct RadialDecomposition {
    pub q: Vec<f64>,
    pub delta: f64,
    pub window: f64,
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    pub w: Vec<Vec<f64>>,
    pub rdot: Vec<f64>,
    /// `g(∂f/∂t, ∂f/∂t)`.
    pub transverse_sq: Vec<f64>,
    /// `g(∂f/∂r, ∂f/∂t)`.
    pub gauss: Vec<f64>,
    pub rdot_sign: i32,
    pub eta: f64,
    /// `ξ(δ)`, a loop at `q` in the same class.
    pub u: TangentVec,
}

impl RadialDecomposition {
    pub fn max_gauss(&self) -> f64 {
        self.gauss.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn min_abs_rdot(&self) -> f64 {
        self.rdot.iter().fold(f64::INFINITY, |m, r| m.min(r.abs()))
    }
}

struct Node {
    xi: Vec<f64>,
    xi_dot: Vec<f64>,
    r: f64,
    rdot: f64,
    transverse_sq: f64,
    gauss: f64,
}

/// Geodesic `α` through the loop base with the loop's unit tangent, on the
/// parameter range `[lo, hi]` containing 0.
struct Alpha {
    fwd: Option<GeodesicSegment>,
    bwd: Option<GeodesicSegment>,
    base: Vec<f64>,
    unit: Vec<f64>,
}

impl Alpha {
    fn new(model: &SpacetimeModel, base: &[f64], unit: &[f64], lo: f64, hi: f64, tol: f64) -> Result<Self> {
        let fwd = if hi > 0.0 {
            Some(integrate_geodesic(model, &TangentVec::new(base.to_vec(), unit.to_vec()), hi, tol)?)
        } else {
            None
        };
        let bwd = if lo < 0.0 {
            let neg: Vec<f64> = unit.iter().map(|x| -x).collect();
            Some(integrate_geodesic(model, &TangentVec::new(base.to_vec(), neg), -lo, tol)?)
        } else {
            None
        };
        Ok(Alpha {
            fwd,
            bwd,
            base: base.to_vec(),
            unit: unit.to_vec(),
        })
    }

    fn at(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        if t > 0.0 {
            self.fwd.as_ref().unwrap().state_at(t)
        } else if t < 0.0 {
            let (x, v) = self.bwd.as_ref().unwrap().state_at(-t);
            (x, v.into_iter().map(|c| -c).collect())
        } else {
            (self.base.clone(), self.unit.clone())
        }
    }
}

fn inversion(msg: impl Into<String>) -> Error {
    Error::InversionFailure(msg.into())
}

/// Newton-corrects `ξ` so that `exp_q(ξ) = target`, then evaluates the
/// radial quantities with `α̇ = target_vel`.
fn solve_node(
    model: &SpacetimeModel,
    q: &[f64],
    mut xi: Vec<f64>,
    target: &[f64],
    target_vel: &[f64],
    tol: f64,
) -> Result<Node> {
    let n = model.dim();
    let mut iters = 0;
    loop {
        let v = TangentVec::new(q.to_vec(), xi.clone());
        let flow = variational_flow(model, &v, 1.0, tol).map_err(|e| {
            if e.is_chart_exit() {
                e
            } else {
                inversion(format!("exp_q failed: {e}"))
            }
        })?;
        let (x1, xd1, phi) = flow.end();
        let b = phi.view((0, n), (n, n)).into_owned();
        let res = model.chart_delta(&x1, target);
        let scale = 1.0 + aux_norm(&xi);
        let lu = b.clone().lu();
        if aux_norm(&res) <= 1e-12 * scale || iters >= NEWTON_MAX {
            if aux_norm(&res) > 1e-9 * scale {
                return Err(inversion(format!("Newton residual {:e}", aux_norm(&res))));
            }
            let xi_dot = lu
                .solve(&DVector::from_column_slice(target_vel))
                .ok_or_else(|| inversion("singular exponential differential"))?;
            let gxx = model.inner_unchecked(q, &xi, &xi);
            if gxx >= 0.0 {
                return Err(inversion("preimage left the timelike cone"));
            }
            let r = (-gxx).sqrt();
            let xi_dot: Vec<f64> = xi_dot.iter().copied().collect();
            let rdot = -model.inner_unchecked(q, &xi, &xi_dot) / r;
            let zeta: Vec<f64> = xi_dot.iter().zip(&xi).map(|(d, x)| d - rdot * x / r).collect();
            let ft: Vec<f64> = (&b * DVector::from_column_slice(&zeta)).iter().copied().collect();
            let fr: Vec<f64> = xd1.iter().map(|c| c / r).collect();
            return Ok(Node {
                transverse_sq: model.inner_unchecked(&x1, &ft, &ft),
                gauss: model.inner_unchecked(&x1, &fr, &ft),
                xi,
                xi_dot,
                r,
                rdot,
            });
        }
        let step = lu
            .solve(&DVector::from_column_slice(&res))
            .ok_or_else(|| inversion("singular exponential differential"))?;
        for i in 0..n {
            xi[i] -= step[i];
        }
        iters += 1;
    }
}

/// Radial decomposition about `q = γ(δ)` on the window `[−θ, θ]`, `θ ≥ |δ|`.
pub fn radial_decomposition(
    model: &SpacetimeModel,
    lp: &LoopCandidate,
    delta: f64,
    window: f64,
    tol: f64,
) -> Result<RadialDecomposition> {
    let l = lp.length;
    if !(delta != 0.0 && delta.abs() < l && delta.is_finite()) {
        return Err(Error::config(format!("step δ must satisfy 0 < |δ| < length, got {delta}")));
    }
    let p = lp.base().to_vec();
    let unit: Vec<f64> = lp.v.comp.iter().map(|c| c / l).collect();
    let (q, qvel) = arclength_point(model, &p, &unit, delta, tol)?;

    let h = delta.abs() / ETA_INTERVALS as f64;
    let theta = window.max(delta.abs());
    let k = (theta / h - 1e-9).ceil() as i64;
    let theta = k as f64 * h;
    let alpha = Alpha::new(model, &p, &unit, -theta, theta, tol)?;
    let a = lp.deck.matrix();
    let target = |t: f64| -> (Vec<f64>, Vec<f64>) {
        let (x, v) = alpha.at(t);
        let pv = a.clone() * DVector::from_column_slice(&v);
        (lp.deck.apply(&x), pv.iter().copied().collect())
    };

    let xi0: Vec<f64> = qvel.iter().map(|c| (l - delta) * c).collect();
    let (x0, v0) = target(0.0);
    let n0 = solve_node(model, &q, xi0, &x0, &v0, tol)?;
    let mut neg: Vec<(f64, Node)> = Vec::new();
    let mut pos: Vec<(f64, Node)> = Vec::new();
    for side in [1.0, -1.0] {
        let out = if side > 0.0 { &mut pos } else { &mut neg };
        let (mut prev_t, mut xi, mut xi_dot) = (0.0, n0.xi.clone(), n0.xi_dot.clone());
        for j in 1..=k {
            let t = side * j as f64 * h;
            let dt = t - prev_t;
            let guess: Vec<f64> = xi.iter().zip(&xi_dot).map(|(x, d)| x + dt * d).collect();
            let (x, v) = target(t);
            let node = solve_node(model, &q, guess, &x, &v, tol)?;
            xi = node.xi.clone();
            xi_dot = node.xi_dot.clone();
            prev_t = t;
            out.push((t, node));
        }
    }
    neg.reverse();
    let nodes: Vec<(f64, Node)> = neg.into_iter().chain(std::iter::once((0.0, n0))).chain(pos).collect();

    let center = nodes.iter().position(|(t, _)| *t == 0.0).unwrap();
    let rdot_sign = if nodes[center].1.rdot >= 0.0 { 1 } else { -1 };
    let m = ETA_INTERVALS;
    let integrand = |node: &Node| {
        let s = node.transverse_sq.max(0.0);
        s / (1.0 + (1.0 + s).sqrt())
    };
    let mut eta = 0.0;
    for j in 0..=m {
        let idx = if delta > 0.0 { center + j } else { center - j };
        let wgt = if j == 0 || j == m {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        eta += wgt * integrand(&nodes[idx].1);
    }
    eta *= h / 3.0;
    let end_idx = if delta > 0.0 { center + m } else { center - m };
    let u = TangentVec::new(q.clone(), nodes[end_idx].1.xi.clone());
    debug!("radial decomposition δ={delta:e} η={eta:e} sign={rdot_sign}");

    Ok(RadialDecomposition {
        q,
        delta,
        window: theta,
        t: nodes.iter().map(|(t, _)| *t).collect(),
        r: nodes.iter().map(|(_, nd)| nd.r).collect(),
        w: nodes
            .iter()
            .map(|(_, nd)| nd.xi.iter().map(|x| x / nd.r).collect())
            .collect(),
        rdot: nodes.iter().map(|(_, nd)| nd.rdot).collect(),
        transverse_sq: nodes.iter().map(|(_, nd)| nd.transverse_sq).collect(),
        gauss: nodes.iter().map(|(_, nd)| nd.gauss).collect(),
        rdot_sign,
        eta,
        u,
    })
}

/// Sign of `ṙ_p(0)` for the decomposition about the loop's own base.
pub fn base_rdot_sign(model: &SpacetimeModel, lp: &LoopCandidate, tol: f64) -> Result<i32> {
    let n = model.dim();
    let l = lp.length;
    let (_, _, phi) = variational_flow(model, &lp.v, 1.0, tol)?.end();
    let b = phi.view((0, n), (n, n)).into_owned();
    let unit: Vec<f64> = lp.v.comp.iter().map(|c| c / l).collect();
    let rhs = DVector::from_column_slice(&lp.deck.push(&unit));
    let xi_dot = b.lu().solve(&rhs).ok_or_else(|| inversion("singular exponential differential"))?;
    let xi_dot: Vec<f64> = xi_dot.iter().copied().collect();
    let rdot = -model.inner_unchecked(lp.base(), &lp.v.comp, &xi_dot) / l;
    Ok(if rdot >= 0.0 { 1 } else { -1 })
}

/// One re-basing step.
#[derive(Debug, Clone, Serialize)]
pub struct HillStep {
    pub lp: LoopCandidate,
    /// Signed re-basing parameter: the new base is `γ(delta)`.
    pub delta: f64,
    pub direction: Direction,
    pub eta: f64,
    pub rdot_sign: i32,
    pub predicted_length: f64,
}

/// `l − δ + s·sgn(δ)·(|δ| + η)`.
pub fn predicted_length(l: f64, delta: f64, rdot_sign: i32, eta: f64) -> f64 {
    l - delta + rdot_sign as f64 * delta.signum() * (delta.abs() + eta)
}

fn stall_band(l: f64) -> f64 {
    (1e-9 * l).max(1e-12)
}

/// Re-bases `lp` by `δ > 0` on the side that stretches or shortens it.
pub fn hill_step(
    model: &SpacetimeModel,
    lp: &LoopCandidate,
    delta: f64,
    direction: Direction,
    opts: &SolveOptions,
) -> Result<HillStep> {
    if direction == Direction::Auto {
        return Err(Error::config("hill_step needs an explicit direction"));
    }
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::config("hill step δ must be positive"));
    }
    let s = base_rdot_sign(model, lp, opts.tol_integ)?;
    let signed = s as f64 * direction.sign() * delta;
    let dec = radial_decomposition(model, lp, signed, delta, opts.tol_integ)?;
    let predicted = predicted_length(lp.length, signed, s, dec.eta);
    let fixed = SolveOptions {
        free_base: false,
        ..*opts
    };
    let new = find_loop(model, &dec.u, &lp.deck, &fixed)?;
    let dl = new.length - lp.length;
    if dl.abs() < stall_band(lp.length) {
        return Err(Error::DegenerateStep { delta_length: dl });
    }
    Ok(HillStep {
        lp: new,
        delta: signed,
        direction,
        eta: dec.eta,
        rdot_sign: s,
        predicted_length: predicted,
    })
}

/// `closure_defect < tol` for a timelike loop.
pub fn is_closed_geodesic(model: &SpacetimeModel, lp: &LoopCandidate, tol: f64) -> bool {
    model.classify(&lp.v).map(|c| c.is_timelike()).unwrap_or(false) && lp.closure_defect < tol
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClimbParams {
    /// Defaults to `length / 50`.
    pub delta0: Option<f64>,
    /// Defaults to `length · 1e-6`.
    pub delta_min: Option<f64>,
    pub closure_tol: f64,
    pub max_steps: usize,
    pub self_conjugate_tol: f64,
}

impl Default for ClimbParams {
    fn default() -> Self {
        ClimbParams {
            delta0: None,
            delta_min: None,
            closure_tol: 1e-8,
            max_steps: 5000,
            self_conjugate_tol: SELF_CONJUGATE_TOL,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceStep {
    pub step_index: usize,
    pub base: Vec<f64>,
    pub v: Vec<f64>,
    pub length: f64,
    pub delta: f64,
    pub direction: Direction,
    pub eta: f64,
    pub rdot_sign: i32,
    pub predicted_length: f64,
    pub closure_defect: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HillClimbTrace {
    pub direction: Direction,
    pub steps: Vec<TraceStep>,
    pub verdict: Verdict,
    #[serde(rename = "final")]
    pub final_loop: LoopCandidate,
    /// Set when the stalled loop was polished as a closed geodesic.
    pub polished: bool,
    pub note: Option<String>,
}

impl HillClimbTrace {
    pub fn lengths(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.length).collect()
    }

    /// One JSON record per step, then a final record with the verdict.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e: std::io::Error| Error::config(format!("trace output failed: {e}"));
        for s in &self.steps {
            writeln!(out, "{}", serde_json::to_string(s).expect("serializable")).map_err(io)?;
        }
        let last = serde_json::json!({
            "verdict": self.verdict,
            "polished": self.polished,
            "note": self.note,
            "final": self.final_loop,
        });
        writeln!(out, "{last}").map_err(io)?;
        Ok(())
    }
}

/// Gauss–Newton on `(p, v) ↦ (exp(v) − deck(p), ẋ(1) − A·v)`, used to polish
/// a stalled loop. Returns `None` if the residual is not reduced below `tol`.
pub fn polish_closed(
    model: &SpacetimeModel,
    lp: &LoopCandidate,
    opts: &SolveOptions,
    tol: f64,
) -> Result<Option<LoopCandidate>> {
    let n = model.dim();
    let a = lp.deck.matrix();
    let eval = |v: &TangentVec| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (x1, xd1, phi) = variational_flow(model, v, 1.0, opts.tol_integ)?.end();
        let r1 = model.chart_delta(&x1, &lp.deck.apply(&v.base));
        let r2 = lp.deck.push(&v.comp);
        let f = DVector::from_iterator(2 * n, r1.into_iter().chain(xd1.iter().zip(&r2).map(|(x, y)| x - y)));
        let mut j = phi.clone();
        j.view_mut((0, 0), (n, n)).sub_assign_from(&a);
        j.view_mut((n, n), (n, n)).sub_assign_from(&a);
        Ok((f, j))
    };
    let mut v = lp.v.clone();
    let (mut f, mut j) = eval(&v)?;
    for _ in 0..30 {
        if f.norm() < tol {
            break;
        }
        let (step, _) = pinv_solve(&j, &(-&f));
        let mut lambda = 1.0;
        let mut moved = false;
        while lambda >= 1e-6 {
            let mut trial = v.clone();
            for i in 0..n {
                trial.base[i] += lambda * step[i];
                trial.comp[i] += lambda * step[n + i];
            }
            if model.classify(&trial).map(|c| c.is_timelike()).unwrap_or(false) {
                if let Ok((f2, j2)) = eval(&trial) {
                    if f2.norm() < f.norm() {
                        v = trial;
                        f = f2;
                        j = j2;
                        moved = true;
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if f.norm() >= tol {
        return Ok(None);
    }
    Ok(Some(LoopCandidate::evaluate(model, &v, &lp.deck, opts.tol_integ)?))
}

trait SubAssignFrom {
    fn sub_assign_from(&mut self, m: &DMatrix<f64>);
}

impl SubAssignFrom for nalgebra::DMatrixViewMut<'_, f64> {
    fn sub_assign_from(&mut self, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self[(i, j)] -= m[(i, j)];
            }
        }
    }
}

/// Repeats [`hill_step`] until the loop closes up, the hypothesis of the
/// step is lost, or the budget runs out.
pub fn hill_climb(
    model: &SpacetimeModel,
    start: &LoopCandidate,
    direction: Direction,
    params: &ClimbParams,
    opts: &SolveOptions,
) -> Result<HillClimbTrace> {
    let l0 = start.length;
    let delta0 = params.delta0.unwrap_or(l0 / 50.0);
    let delta_min = params.delta_min.unwrap_or(l0 * 1e-6);
    if !(delta0 > 0.0 && delta_min > 0.0 && delta_min <= delta0) {
        return Err(Error::config("need 0 < δ_min ≤ δ0"));
    }
    let mut trace = HillClimbTrace {
        direction,
        steps: Vec::new(),
        verdict: Verdict::BudgetExhausted,
        final_loop: start.clone(),
        polished: false,
        note: None,
    };
    if is_closed_geodesic(model, start, params.closure_tol) {
        trace.verdict = Verdict::ClosedGeodesic;
        return Ok(trace);
    }
    if is_self_conjugate(model, start, params.self_conjugate_tol, opts.tol_integ)?.0 {
        trace.verdict = Verdict::SelfConjugateAbort;
        return Ok(trace);
    }

    let mut cur = start.clone();
    let mut delta = delta0;
    let mut dir = direction;
    if dir == Direction::Auto {
        let mut best: Option<HillStep> = None;
        for d in [Direction::Stretch, Direction::Shorten] {
            match hill_step(model, &cur, delta0, d, opts) {
                Ok(st) => {
                    if best.as_ref().is_none_or(|b| st.lp.closure_defect < b.lp.closure_defect) {
                        best = Some(st);
                    }
                }
                Err(e) => debug!("probe {d:?} failed: {e}"),
            }
        }
        match best {
            Some(st) => {
                dir = st.direction;
                info!("probe chose {dir:?}");
                push_step(&mut trace, &st);
                cur = st.lp;
            }
            None => dir = Direction::Shorten,
        }
        trace.direction = dir;
    }

    loop {
        if is_closed_geodesic(model, &cur, params.closure_tol) {
            trace.verdict = Verdict::ClosedGeodesic;
            break;
        }
        if trace.steps.len() >= params.max_steps {
            trace.verdict = Verdict::BudgetExhausted;
            break;
        }
        if delta < delta_min {
            trace.verdict = finish_stalled(model, &mut cur, &mut trace, params, opts)?;
            break;
        }
        match hill_step(model, &cur, delta, dir, opts) {
            Ok(st) => {
                let dl = st.lp.length - cur.length;
                if dl * dir.sign() <= 0.0 {
                    debug!("step against direction ({dl:e}); halving δ");
                    delta *= 0.5;
                    continue;
                }
                push_step(&mut trace, &st);
                cur = st.lp;
                if is_self_conjugate(model, &cur, params.self_conjugate_tol, opts.tol_integ)?.0 {
                    trace.verdict = Verdict::SelfConjugateAbort;
                    break;
                }
                delta = (2.0 * delta).min(delta0);
            }
            Err(Error::DegenerateStep { delta_length }) => {
                debug!("stall at δ={delta:e} (Δl={delta_length:e})");
                trace.verdict = finish_stalled(model, &mut cur, &mut trace, params, opts)?;
                break;
            }
            Err(e) if e.is_chart_exit() => {
                trace.verdict = Verdict::ChartBoundaryAbort;
                trace.note = Some(e.to_string());
                break;
            }
            Err(e) => {
                debug!("step failed at δ={delta:e}: {e}");
                delta *= 0.5;
            }
        }
    }
    trace.final_loop = cur;
    Ok(trace)
}

fn finish_stalled(
    model: &SpacetimeModel,
    cur: &mut LoopCandidate,
    trace: &mut HillClimbTrace,
    params: &ClimbParams,
    opts: &SolveOptions,
) -> Result<Verdict> {
    if is_closed_geodesic(model, cur, params.closure_tol) {
        return Ok(Verdict::ClosedGeodesic);
    }
    let target = (0.1 * params.closure_tol).max(opts.tol_solve);
    match polish_closed(model, cur, opts, target) {
        Ok(Some(p)) if is_closed_geodesic(model, &p, params.closure_tol) => {
            let dl = (p.length - cur.length).abs();
            trace.note = Some(format!("stalled loop polished (length change {dl:e})"));
            trace.polished = true;
            *cur = p;
            Ok(Verdict::ClosedGeodesic)
        }
        Ok(_) => {
            trace.note = Some("stalled without closing".into());
            Ok(Verdict::BudgetExhausted)
        }
        Err(e) if e.is_chart_exit() => {
            trace.note = Some(e.to_string());
            Ok(Verdict::ChartBoundaryAbort)
        }
        Err(e) => {
            trace.note = Some(format!("polish failed: {e}"));
            Ok(Verdict::BudgetExhausted)
        }
    }
}

fn push_step(trace: &mut HillClimbTrace, st: &HillStep) {
    trace.steps.push(TraceStep {
        step_index: trace.steps.len(),
        base: st.lp.v.base.clone(),
        v: st.lp.v.comp.clone(),
        length: st.lp.length,
        delta: st.delta,
        direction: st.direction,
        eta: st.eta,
        rdot_sign: st.rdot_sign,
        predicted_length: st.predicted_length,
        closure_defect: st.lp.closure_defect,
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::WarpProfile;

    fn warped_loop() -> (SpacetimeModel, LoopCandidate) {
        let m = SpacetimeModel::warped_cylinder(WarpProfile::Cosh, 1.0);
        let t = m.deck_element("T").unwrap();
        let lp = find_loop(&m, &TangentVec::new([0.0, 0.4], [1.05, 0.1]), &t, &SolveOptions::default()).unwrap();
        (m, lp)
    }

    #[test]
    fn cylinder_decomposition_is_degenerate() {
        let m = SpacetimeModel::cylinder(1.0);
        let t = m.deck_element("T").unwrap();
        let lp = LoopCandidate::evaluate(&m, &TangentVec::new([0.0, 0.0], [1.0, 0.0]), &t, 1e-10).unwrap();
        let dec = radial_decomposition(&m, &lp, 0.02, 0.02, 1e-10).unwrap();
        assert!(dec.eta.abs() < 1e-14);
        assert!(dec.rdot.iter().all(|r| (r.abs() - 1.0).abs() < 1e-10));
        assert!(matches!(
            hill_step(&m, &lp, 0.02, Direction::Stretch, &SolveOptions::default()),
            Err(Error::DegenerateStep { .. })
        ));
    }

    #[test]
    fn warped_decomposition() {
        let (m, lp) = warped_loop();
        let dec = radial_decomposition(&m, &lp, 0.02, 0.04, 1e-11).unwrap();
        assert!(dec.eta > 0.0);
        assert!(dec.max_gauss() < 1e-8, "{}", dec.max_gauss());
        assert!(dec.min_abs_rdot() >= 1.0 - 1e-8);
        assert!(dec.rdot.iter().all(|r| r.signum() as i32 == dec.rdot_sign));
    }

    #[test]
    fn warped_steps_follow_prediction() {
        let (m, lp) = warped_loop();
        let opts = SolveOptions {
            tol_integ: 1e-11,
            ..SolveOptions::default()
        };
        let up = hill_step(&m, &lp, 0.02, Direction::Stretch, &opts).unwrap();
        assert!(up.lp.length > lp.length);
        assert!((up.lp.length - up.predicted_length).abs() < 1e-6);
        let down = hill_step(&m, &lp, 0.02, Direction::Shorten, &opts).unwrap();
        assert!(down.lp.length < lp.length);
        assert!((down.lp.length - down.predicted_length).abs() < 1e-6);
        assert_eq!(up.lp.deck.label, "T");
    }

    #[test]
    fn cylinder_climb_closes_immediately() {
        let m = SpacetimeModel::cylinder(1.0);
        let t = m.deck_element("T").unwrap();
        let lp = LoopCandidate::evaluate(&m, &TangentVec::new([0.0, 0.0], [1.0, 0.0]), &t, 1e-10).unwrap();
        let tr = hill_climb(&m, &lp, Direction::Auto, &ClimbParams::default(), &SolveOptions::default()).unwrap();
        assert_eq!(tr.verdict, Verdict::ClosedGeodesic);
        assert!(tr.steps.len() <= 1);
    }

    #[test]
    fn predicted_length_cases() {
        assert!((predicted_length(1.0, -0.1, -1, 0.01) - 1.21).abs() < 1e-15);
        assert!((predicted_length(1.0, 0.1, -1, 0.01) - 0.79).abs() < 1e-15);
        assert!((predicted_length(1.0, 0.1, 1, 0.01) - 1.01).abs() < 1e-15);
        assert!((predicted_length(1.0, -0.1, 1, 0.01) - 0.99).abs() < 1e-15);
    }
}
