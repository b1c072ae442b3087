//! Geodesic integration, the exponential map and Lorentzian length.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::manifold::{Causal, Character, SpacetimeModel, TangentVec};
use crate::ode::{self, DenseSolution, OdeFailure};

/// Default integrator tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;

const GL3_NODES: [f64; 3] = [
    0.112_701_665_379_258_31,
    0.5,
    0.887_298_334_620_741_7,
];
const GL3_WEIGHTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

fn check_tol(tol: f64) -> Result<()> {
    if !(1e-14..=1e-3).contains(&tol) {
        return Err(Error::config(format!("integrator tolerance {tol:e} outside [1e-14, 1e-3]")));
    }
    Ok(())
}

fn map_failure(f: OdeFailure) -> Error {
    let reason = match f {
        OdeFailure::StepUnderflow { .. } => "step size underflow",
        OdeFailure::TooManySteps { .. } => "step budget exhausted",
        OdeFailure::Inadmissible { .. } => "chart exit",
    };
    Error::Integration {
        reason: reason.into(),
        last_t: f.last_t(),
    }
}

/// Right-hand side of `ẍ^a = −Γ^a_{bc} ẋ^b ẋ^c` on the state `(x, ẋ)`.
fn geodesic_rhs(model: &SpacetimeModel) -> impl FnMut(&[f64], &mut [f64]) + '_ {
    let n = model.dim();
    let mut gamma = vec![0.0; n * n * n];
    move |y: &[f64], dy: &mut [f64]| {
        let (x, v) = y.split_at(n);
        model.christoffel_into(x, &mut gamma);
        dy[..n].copy_from_slice(v);
        for a in 0..n {
            let mut acc = 0.0;
            for b in 0..n {
                for c in 0..n {
                    acc += gamma[(a * n + b) * n + c] * v[b] * v[c];
                }
            }
            dy[n + a] = -acc;
        }
    }
}

/// An integrated geodesic on `[0, T]` with dense output.
#[derive(Debug, Clone)]
pub struct GeodesicSegment {
    pub initial: TangentVec,
    pub t_end: f64,
    pub character: Causal,
    /// Quadrature of `|γ̇|` over the span (zero for null geodesics).
    pub length: f64,
    pub tol: f64,
    solution: DenseSolution,
}

impl GeodesicSegment {
    pub fn dim(&self) -> usize {
        self.initial.base.len()
    }

    /// `(γ(t), γ̇(t))`.
    pub fn state_at(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let y = self.solution.eval(t);
        let n = self.dim();
        (y[..n].to_vec(), y[n..].to_vec())
    }

    pub fn endpoint(&self) -> Vec<f64> {
        self.solution.final_state()[..self.dim()].to_vec()
    }

    pub fn end_velocity(&self) -> Vec<f64> {
        self.solution.final_state()[self.dim()..].to_vec()
    }

    /// Integrator nodes (including both ends).
    pub fn nodes(&self) -> &[f64] {
        self.solution.nodes()
    }

    /// `|γ̇(0)|·T`.
    pub fn nominal_length(&self, model: &SpacetimeModel) -> f64 {
        if self.character.character == Character::Null {
            return 0.0;
        }
        model.norm(&self.initial) * self.t_end
    }

    /// Largest `|g(γ̇,γ̇) − g(v,v)|` over the integrator nodes.
    pub fn energy_drift(&self, model: &SpacetimeModel) -> f64 {
        let n = self.dim();
        let e0 = model.inner_unchecked(&self.initial.base, &self.initial.comp, &self.initial.comp);
        (0..self.solution.nodes().len())
            .map(|i| {
                let y = self.solution.node_state(i);
                (model.inner_unchecked(&y[..n], &y[n..], &y[n..]) - e0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Uniform samples `(t, x, v)` at `count ≥ 2` parameters.
    pub fn uniform_samples(&self, count: usize) -> Vec<(f64, Vec<f64>, Vec<f64>)> {
        let count = count.max(2);
        (0..count)
            .map(|i| {
                let t = self.t_end * i as f64 / (count - 1) as f64;
                let (x, v) = self.state_at(t);
                (t, x, v)
            })
            .collect()
    }

    /// CSV trajectory dump with columns `t, x_0.., v_0..`.
    pub fn write_csv<W: Write>(&self, out: W, count: usize) -> Result<()> {
        let n = self.dim();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x_{i}")));
        header.extend((0..n).map(|i| format!("v_{i}")));
        w.write_record(&header).map_err(io_err)?;
        for (t, x, v) in self.uniform_samples(count) {
            let row: Vec<String> = std::iter::once(t)
                .chain(x)
                .chain(v)
                .map(|z| format!("{z:e}"))
                .collect();
            w.write_record(&row).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }
}

fn io_err(e: csv::Error) -> Error {
    Error::config(format!("csv output failed: {e}"))
}

/// Integrates the geodesic with initial velocity `v` on `[0, t_end]`.
pub fn integrate_geodesic(
    model: &SpacetimeModel,
    v: &TangentVec,
    t_end: f64,
    tol: f64,
) -> Result<GeodesicSegment> {
    check_tol(tol)?;
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::config(format!("parameter span must be positive, got {t_end}")));
    }
    let character = model.classify(v)?;
    let n = model.dim();
    let mut y0 = v.base.clone();
    y0.extend_from_slice(&v.comp);
    let solution = ode::integrate(geodesic_rhs(model), &y0, t_end, tol, |y| model.in_domain(&y[..n]))
        .map_err(map_failure)?;
    let mut seg = GeodesicSegment {
        initial: v.clone(),
        t_end,
        character,
        length: 0.0,
        tol,
        solution,
    };
    seg.length = if character.character == Character::Null {
        0.0
    } else {
        quadrature_length(model, &seg)
    };
    Ok(seg)
}

fn quadrature_length(model: &SpacetimeModel, seg: &GeodesicSegment) -> f64 {
    let n = seg.dim();
    let nodes = seg.solution.nodes();
    let mut y = vec![0.0; 2 * n];
    let mut total = 0.0;
    for w in nodes.windows(2) {
        let h = w[1] - w[0];
        for (s, wt) in GL3_NODES.iter().zip(GL3_WEIGHTS) {
            seg.solution.eval_into(w[0] + s * h, &mut y);
            let gvv = model.inner_unchecked(&y[..n], &y[n..], &y[n..]);
            total += h * wt * gvv.abs().sqrt();
        }
    }
    total
}

/// `exp(v) = γ_v(1)`; quotient models are not canonicalized.
pub fn exp_map(model: &SpacetimeModel, v: &TangentVec, tol: f64) -> Result<Vec<f64>> {
    Ok(integrate_geodesic(model, v, 1.0, tol)?.endpoint())
}

/// Geodesic together with its coordinate variational matrix `Φ(t)`, the
/// `2n×2n` derivative of `(x(t), ẋ(t))` with respect to `(x(0), ẋ(0))`.
#[derive(Debug, Clone)]
pub struct VariationalFlow {
    n: usize,
    solution: DenseSolution,
}

impl VariationalFlow {
    pub fn t_end(&self) -> f64 {
        self.solution.t_end()
    }

    pub fn nodes(&self) -> &[f64] {
        self.solution.nodes()
    }

    fn split(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
        let n = self.n;
        let m = 2 * n;
        let phi = DMatrix::from_row_slice(m, m, &y[m..m + m * m]);
        (y[..n].to_vec(), y[n..m].to_vec(), phi)
    }

    /// `(x(t), ẋ(t), Φ(t))`.
    pub fn at(&self, t: f64) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
        self.split(&self.solution.eval(t))
    }

    pub fn end(&self) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
        self.split(self.solution.final_state())
    }
}

/// Integrates the geodesic and its linearization about it.
pub fn variational_flow(
    model: &SpacetimeModel,
    v: &TangentVec,
    t_end: f64,
    tol: f64,
) -> Result<VariationalFlow> {
    check_tol(tol)?;
    model.check_tangent(v)?;
    let n = model.dim();
    let m = 2 * n;
    let mut y0 = vec![0.0; m + m * m];
    y0[..n].copy_from_slice(&v.base);
    y0[n..m].copy_from_slice(&v.comp);
    for i in 0..m {
        y0[m + i * m + i] = 1.0;
    }
    let mut gamma = vec![0.0; n * n * n];
    let mut dgamma = vec![0.0; n * n * n * n];
    let mut m1 = vec![0.0; n * n];
    let mut m2 = vec![0.0; n * n];
    let rhs = |y: &[f64], dy: &mut [f64]| {
        let x = &y[..n];
        let vel = &y[n..m];
        model.christoffel_into(x, &mut gamma);
        model.christoffel_deriv_into(x, &mut dgamma);
        dy[..n].copy_from_slice(vel);
        for a in 0..n {
            let mut acc = 0.0;
            for b in 0..n {
                for c in 0..n {
                    acc += gamma[(a * n + b) * n + c] * vel[b] * vel[c];
                }
            }
            dy[n + a] = -acc;
        }
        // m1[a][d] = ∂_d Γ^a_bc v^b v^c, m2[a][c] = 2 Γ^a_bc v^b
        for a in 0..n {
            for d in 0..n {
                let mut acc = 0.0;
                for b in 0..n {
                    for c in 0..n {
                        acc += dgamma[((a * n + b) * n + c) * n + d] * vel[b] * vel[c];
                    }
                }
                m1[a * n + d] = acc;
            }
            for c in 0..n {
                let mut acc = 0.0;
                for b in 0..n {
                    acc += gamma[(a * n + b) * n + c] * vel[b];
                }
                m2[a * n + c] = 2.0 * acc;
            }
        }
        let phi = &y[m..];
        let dphi = &mut dy[m..];
        for j in 0..m {
            for a in 0..n {
                dphi[a * m + j] = phi[(n + a) * m + j];
                let mut acc = 0.0;
                for d in 0..n {
                    acc += m1[a * n + d] * phi[d * m + j] + m2[a * n + d] * phi[(n + d) * m + j];
                }
                dphi[(n + a) * m + j] = -acc;
            }
        }
    };
    let solution =
        ode::integrate(rhs, &y0, t_end, tol, |y| model.in_domain(&y[..n])).map_err(map_failure)?;
    Ok(VariationalFlow { n, solution })
}

/// Point and velocity at unit-speed arclength `tau` (may be negative) along
/// the geodesic through `base` with unit velocity `unit`.
pub fn arclength_point(
    model: &SpacetimeModel,
    base: &[f64],
    unit: &[f64],
    tau: f64,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if tau == 0.0 {
        return Ok((base.to_vec(), unit.to_vec()));
    }
    let sign = tau.signum();
    let v = TangentVec::new(base.to_vec(), unit.iter().map(|x| sign * x).collect::<Vec<_>>());
    let seg = integrate_geodesic(model, &v, tau.abs(), tol)?;
    let vel = seg.end_velocity().into_iter().map(|x| sign * x).collect();
    Ok((seg.endpoint(), vel))
}
