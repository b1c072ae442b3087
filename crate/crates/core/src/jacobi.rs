//! Jacobi fields along geodesics: the derivative of the exponential map,
//! conjugate points and self-conjugacy of loops.
//!
//! Fields are carried in chart components as `(J, J′)` with `J′` the
//! covariant derivative along the geodesic. Internally they are obtained from
//! the coordinate variational matrix via `J′ = δẋ + Γ(ẋ, δx)`.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geodesic::{variational_flow, GeodesicSegment, VariationalFlow};
use crate::loopspace::LoopCandidate;
use crate::manifold::{SpacetimeModel, TangentVec};

/// Magnitude below which the normalized determinant counts as a zero even
/// without a sign change.
pub const DIP_THRESHOLD: f64 = 1e-6;

/// Default threshold for [`is_self_conjugate`].
pub const SELF_CONJUGATE_TOL: f64 = 1e-6;

/// `det B / (‖B‖_F / √n)^n`, which lies in `[−1, 1]` and vanishes exactly when
/// `B` is singular.
pub fn normalized_det(b: &DMatrix<f64>) -> f64 {
    let n = b.nrows() as f64;
    let rms = b.norm() / n.sqrt();
    if rms == 0.0 {
        return 0.0;
    }
    b.determinant() / rms.powf(n)
}

/// `K^a_c = Γ^a_{bc} ẋ^b`.
fn connection_matrix(model: &SpacetimeModel, x: &[f64], vel: &[f64]) -> DMatrix<f64> {
    let n = model.dim();
    let mut gamma = vec![0.0; n * n * n];
    model.christoffel_into(x, &mut gamma);
    DMatrix::from_fn(n, n, |a, c| (0..n).map(|b| gamma[(a * n + b) * n + c] * vel[b]).sum())
}

/// Linear propagator of Jacobi data along a geodesic segment.
#[derive(Debug, Clone)]
pub struct JacobiPropagator {
    pub segment: GeodesicSegment,
    flow: VariationalFlow,
    n: usize,
}

impl JacobiPropagator {
    pub fn new(model: &SpacetimeModel, segment: &GeodesicSegment) -> Result<Self> {
        let flow = variational_flow(model, &segment.initial, segment.t_end, segment.tol)?;
        Ok(JacobiPropagator {
            segment: segment.clone(),
            flow,
            n: model.dim(),
        })
    }

    /// The `2n×2n` map `(J(0), J′(0)) ↦ (J(t), J′(t))`.
    pub fn transition(&self, model: &SpacetimeModel, t: f64) -> DMatrix<f64> {
        let n = self.n;
        let (x, vel, phi) = self.flow.at(t);
        let mut c_t = DMatrix::identity(2 * n, 2 * n);
        c_t.view_mut((n, 0), (n, n))
            .copy_from(&connection_matrix(model, &x, &vel));
        let init = &self.segment.initial;
        let mut c0_inv = DMatrix::identity(2 * n, 2 * n);
        c0_inv
            .view_mut((n, 0), (n, n))
            .copy_from(&(-connection_matrix(model, &init.base, &init.comp)));
        c_t * phi * c0_inv
    }

    /// The block sending `J′(0)` to `J(t)` for fields with `J(0) = 0`.
    pub fn zero_start_block(&self, t: f64) -> DMatrix<f64> {
        let n = self.n;
        let (_, _, phi) = self.flow.at(t);
        phi.view((0, n), (n, n)).into_owned()
    }

    pub fn t_end(&self) -> f64 {
        self.flow.t_end()
    }

    pub fn nodes(&self) -> &[f64] {
        self.flow.nodes()
    }
}

/// A Jacobi field given by its initial data.
#[derive(Debug, Clone)]
pub struct JacobiField {
    pub propagator: JacobiPropagator,
    pub j0: Vec<f64>,
    pub j0dot: Vec<f64>,
}

impl JacobiField {
    /// `(J(t), J′(t))`.
    pub fn at(&self, model: &SpacetimeModel, t: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.j0.len();
        let m = self.propagator.transition(model, t);
        let init = nalgebra::DVector::from_iterator(2 * n, self.j0.iter().chain(&self.j0dot).copied());
        let out = m * init;
        (out.rows(0, n).iter().copied().collect(), out.rows(n, n).iter().copied().collect())
    }

    pub fn sample(&self, model: &SpacetimeModel, count: usize) -> Vec<(f64, Vec<f64>)> {
        let count = count.max(2);
        let t_end = self.propagator.t_end();
        (0..count)
            .map(|i| {
                let t = t_end * i as f64 / (count - 1) as f64;
                (t, self.at(model, t).0)
            })
            .collect()
    }
}

pub fn jacobi_propagate(
    model: &SpacetimeModel,
    seg: &GeodesicSegment,
    j0: &[f64],
    j0dot: &[f64],
) -> Result<JacobiField> {
    let n = model.dim();
    if j0.len() != n || j0dot.len() != n {
        return Err(Error::config(format!("Jacobi data must have {n} components")));
    }
    Ok(JacobiField {
        propagator: JacobiPropagator::new(model, seg)?,
        j0: j0.to_vec(),
        j0dot: j0dot.to_vec(),
    })
}

/// `(d exp_p)_v` as an `n×n` matrix.
pub fn dexp_matrix(model: &SpacetimeModel, v: &TangentVec, tol: f64) -> Result<DMatrix<f64>> {
    let n = model.dim();
    let (_, _, phi) = variational_flow(model, v, 1.0, tol)?.end();
    Ok(phi.view((0, n), (n, n)).into_owned())
}

/// `(d exp_p)_v(w) = J(1)` for the field with `J(0) = 0`, `J′(0) = w`.
pub fn dexp(model: &SpacetimeModel, v: &TangentVec, w: &[f64], tol: f64) -> Result<Vec<f64>> {
    let b = dexp_matrix(model, v, tol)?;
    Ok((b * nalgebra::DVector::from_column_slice(w)).iter().copied().collect())
}

/// `(t, normalized det)` of the zero-start block on a uniform grid in `(0, T]`.
pub fn determinant_profile(prop: &JacobiPropagator, count: usize) -> Vec<(f64, f64)> {
    let t_end = prop.t_end();
    let count = count.max(2);
    (1..=count)
        .map(|i| {
            let t = t_end * i as f64 / count as f64;
            (t, normalized_det(&prop.zero_start_block(t)))
        })
        .collect()
}

pub fn write_determinant_csv<W: Write>(profile: &[(f64, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "det"]).map_err(|e| Error::config(e.to_string()))?;
    for (t, d) in profile {
        w.write_record([format!("{t:e}"), format!("{d:e}")])
            .map_err(|e| Error::config(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::config(e.to_string()))?;
    Ok(())
}

/// Parameters in `(0, T]` conjugate to `γ(0)` along `seg`, refined to `tol`
/// in parameter, ascending.
pub fn conjugate_points(model: &SpacetimeModel, seg: &GeodesicSegment, tol: f64) -> Result<Vec<f64>> {
    if !seg.character.is_causal() {
        return Err(Error::Precondition("conjugate points are searched along causal geodesics".into()));
    }
    let prop = JacobiPropagator::new(model, seg)?;
    Ok(conjugate_points_of(&prop, tol))
}

pub(crate) fn conjugate_points_of(prop: &JacobiPropagator, tol: f64) -> Vec<f64> {
    let tol = tol.max(1e-14);
    let t_end = prop.t_end();
    let count = (8 * prop.nodes().len()).max(256);
    let profile = determinant_profile(prop, count);
    let det = |t: f64| normalized_det(&prop.zero_start_block(t));

    let mut roots = Vec::new();
    let mut bracketed = vec![false; profile.len()];
    for i in 0..profile.len() {
        let (t, d) = profile[i];
        if d == 0.0 {
            roots.push(t);
            bracketed[i] = true;
            continue;
        }
        if i + 1 < profile.len() && d * profile[i + 1].1 < 0.0 {
            let (mut lo, mut hi) = (t, profile[i + 1].0);
            let mut dlo = d;
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                let dm = det(mid);
                if dm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if dm * dlo < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    dlo = dm;
                }
            }
            roots.push(0.5 * (lo + hi));
            bracketed[i] = true;
            bracketed[i + 1] = true;
        }
    }
    // even-order zeros: local minima of |det| below the dip threshold
    for i in 1..profile.len().saturating_sub(1) {
        if bracketed[i] || bracketed[i - 1] || bracketed[i + 1] {
            continue;
        }
        let (a, b, c) = (profile[i - 1].1.abs(), profile[i].1.abs(), profile[i + 1].1.abs());
        if b <= a && b <= c && b < DIP_THRESHOLD {
            let t = golden_min(|t| det(t).abs(), profile[i - 1].0, profile[i + 1].0, tol);
            if det(t).abs() < DIP_THRESHOLD {
                roots.push(t);
            }
        }
    }
    if let Some(&(t, d)) = profile.last() {
        let near = roots.iter().any(|r| (t - r).abs() <= t_end / count as f64);
        if d.abs() < DIP_THRESHOLD && !near {
            roots.push(t);
        }
    }
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots.dedup_by(|a, b| (*a - *b).abs() <= 10.0 * tol);
    roots
}

fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Whether `γ(1)` is conjugate to `γ(0)` along the loop; returns the verdict
/// and the normalized determinant of `(d exp_p)_v`.
pub fn is_self_conjugate(
    model: &SpacetimeModel,
    lp: &LoopCandidate,
    tol: f64,
    integ_tol: f64,
) -> Result<(bool, f64)> {
    let b = dexp_matrix(model, &lp.v, integ_tol)?;
    let d = normalized_det(&b).abs();
    Ok((d < tol, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesic::integrate_geodesic;
    use std::f64::consts::PI;

    #[test]
    fn flat_jacobi_is_linear_in_t() {
        let m = SpacetimeModel::minkowski(2);
        let seg = integrate_geodesic(&m, &TangentVec::new([0.0, 0.0], [1.0, 0.3]), 4.0, 1e-10).unwrap();
        let field = jacobi_propagate(&m, &seg, &[0.0, 0.0], &[0.2, -0.7]).unwrap();
        for t in [0.5, 1.0, 3.3, 4.0] {
            let (j, jd) = field.at(&m, t);
            assert!((j[0] - 0.2 * t).abs() < 1e-12 && (j[1] + 0.7 * t).abs() < 1e-12);
            assert!((jd[0] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn tangent_field_is_jacobi() {
        let m = SpacetimeModel::ads2();
        let v = TangentVec::new([0.4, 0.3], [1.1, 0.2]);
        let seg = integrate_geodesic(&m, &v, 2.0, 1e-11).unwrap();
        let field = jacobi_propagate(&m, &seg, &v.comp, &[0.0, 0.0]).unwrap();
        for t in [0.5, 1.3, 2.0] {
            let (j, _) = field.at(&m, t);
            let (_, vel) = seg.state_at(t);
            for i in 0..2 {
                assert!((j[i] - vel[i]).abs() < 1e-8, "t={t}: {j:?} vs {vel:?}");
            }
        }
    }

    #[test]
    fn propagator_starts_at_identity() {
        let m = SpacetimeModel::ads2();
        let seg = integrate_geodesic(&m, &TangentVec::new([0.0, 0.5], [1.0, 0.1]), 1.0, 1e-10).unwrap();
        let prop = JacobiPropagator::new(&m, &seg).unwrap();
        let t0 = prop.transition(&m, 0.0);
        assert!((t0 - DMatrix::identity(4, 4)).amax() < 1e-14);
    }

    #[test]
    fn dexp_of_zero_is_zero() {
        let m = SpacetimeModel::ads2();
        let w = dexp(&m, &TangentVec::new([0.0, 0.0], [2.0, 0.3]), &[0.0, 0.0], 1e-10).unwrap();
        assert_eq!(w, vec![0.0, 0.0]);
    }

    #[test]
    fn minkowski_dexp_is_identity() {
        let m = SpacetimeModel::minkowski(2);
        let w = dexp(&m, &TangentVec::new([1.0, 2.0], [2.0, 0.3]), &[0.4, -1.0], 1e-10).unwrap();
        assert!((w[0] - 0.4).abs() < 1e-14 && (w[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn ads2_conjugate_points_at_pi_and_two_pi() {
        let m = SpacetimeModel::ads2();
        let seg = integrate_geodesic(&m, &TangentVec::new([0.0, 0.0], [1.0, 0.0]), 2.0 * PI, 1e-11).unwrap();
        let pts = conjugate_points(&m, &seg, 1e-10).unwrap();
        assert_eq!(pts.len(), 2, "{pts:?}");
        assert!((pts[0] - PI).abs() < 1e-4);
        assert!((pts[1] - 2.0 * PI).abs() < 1e-4);
    }

    #[test]
    fn spacelike_segment_rejected() {
        let m = SpacetimeModel::minkowski(2);
        let seg = integrate_geodesic(&m, &TangentVec::new([0.0, 0.0], [0.0, 1.0]), 1.0, 1e-10).unwrap();
        assert!(conjugate_points(&m, &seg, 1e-10).is_err());
    }

    #[test]
    fn normalized_det_bounds() {
        assert_eq!(normalized_det(&DMatrix::identity(3, 3)), 1.0);
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1e-9]);
        assert!(normalized_det(&b).abs() < 1e-8);
        assert_eq!(normalized_det(&DMatrix::zeros(2, 2)), 0.0);
    }
}
