//! Dormand–Prince 5(4) integrator with continuous (dense) output.
//!
//! The step controller is a pure function of its inputs, so identical calls
//! produce bitwise-identical solutions regardless of threading.

const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
/// Relative step below which a chart exit is reported.
const EXIT_RESOLUTION: f64 = 1e-6;
const MAX_STEPS: usize = 200_000;

/// Why an integration stopped early.
#[derive(Debug, Clone, PartialEq)]
pub enum OdeFailure {
    StepUnderflow { t: f64 },
    TooManySteps { t: f64 },
    /// The state left the admissible set (chart exit or non-finite values).
    Inadmissible { t: f64 },
}

impl OdeFailure {
    pub fn last_t(&self) -> f64 {
        match *self {
            OdeFailure::StepUnderflow { t }
            | OdeFailure::TooManySteps { t }
            | OdeFailure::Inadmissible { t } => t,
        }
    }
}

/// Piecewise quartic interpolant over accepted steps.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    dim: usize,
    /// Step boundaries, `ts[0] = 0`, `ts.last() = t_end`.
    ts: Vec<f64>,
    /// States at the step boundaries, `dim` values per node.
    ys: Vec<f64>,
    /// Five coefficient vectors per step.
    cont: Vec<f64>,
}

impl DenseSolution {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t_end(&self) -> f64 {
        *self.ts.last().unwrap()
    }

    pub fn steps(&self) -> usize {
        self.ts.len() - 1
    }

    /// Parameters of the accepted nodes, including both endpoints.
    pub fn nodes(&self) -> &[f64] {
        &self.ts
    }

    pub fn node_state(&self, i: usize) -> &[f64] {
        &self.ys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.node_state(self.ts.len() - 1)
    }

    /// Evaluates the interpolant at `t`, clamped to the integration span.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let t = t.clamp(0.0, self.t_end());
        let nsteps = self.steps();
        if nsteps == 0 {
            out.copy_from_slice(self.node_state(0));
            return;
        }
        let k = match self.ts.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => {
                out.copy_from_slice(self.node_state(i));
                return;
            }
            Err(i) => (i.max(1) - 1).min(nsteps - 1),
        };
        let h = self.ts[k + 1] - self.ts[k];
        let s = (t - self.ts[k]) / h;
        let s1 = 1.0 - s;
        let n = self.dim;
        let c = &self.cont[k * 5 * n..(k + 1) * 5 * n];
        for i in 0..n {
            out[i] = c[i]
                + s * (c[n + i] + s1 * (c[2 * n + i] + s * (c[3 * n + i] + s1 * c[4 * n + i])));
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }
}

fn scaled_rms(v: &[f64], y0: &[f64], y1: Option<&[f64]>, tol: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..v.len() {
        let mag = match y1 {
            Some(y1) => y0[i].abs().max(y1[i].abs()),
            None => y0[i].abs(),
        };
        let sk = tol + tol * mag;
        acc += (v[i] / sk).powi(2);
    }
    (acc / v.len() as f64).sqrt()
}

/// Integrates the autonomous system `y' = f(y)` on `[0, t_end]`.
///
/// `tol` is used as both absolute and relative tolerance. `admissible` is
/// checked after every accepted step; a `false` aborts with the last accepted
/// parameter.
pub fn integrate<F, G>(
    mut f: F,
    y0: &[f64],
    t_end: f64,
    tol: f64,
    admissible: G,
) -> Result<DenseSolution, OdeFailure>
where
    F: FnMut(&[f64], &mut [f64]),
    G: Fn(&[f64]) -> bool,
{
    let n = y0.len();
    let mut sol = DenseSolution {
        dim: n,
        ts: vec![0.0],
        ys: y0.to_vec(),
        cont: Vec::new(),
    };
    if t_end <= 0.0 {
        return Ok(sol);
    }
    if !y0.iter().all(|x| x.is_finite()) || !admissible(y0) {
        return Err(OdeFailure::Inadmissible { t: 0.0 });
    }

    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut y = y0.to_vec();
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut err = vec![0.0; n];
    f(&y, &mut k[0]);

    let mut h = initial_step(&mut f, &y, &k[0], t_end, tol);
    let mut t = 0.0;
    let mut steps = 0usize;
    let mut last_rejected = false;

    while t < t_end {
        if steps >= MAX_STEPS {
            return Err(OdeFailure::TooManySteps { t });
        }
        steps += 1;
        let last = t + h >= t_end || (t_end - (t + h)) < 1e-12 * t_end.max(1.0);
        if last {
            h = t_end - t;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(OdeFailure::StepUnderflow { t });
        }

        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                ytmp[i] = y[i] + h * acc;
            }
            f(&ytmp, &mut k[s]);
            if s == 6 {
                ynew.copy_from_slice(&ytmp);
            }
        }
        for i in 0..n {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc += E[j] * kj[i];
            }
            err[i] = h * acc;
        }
        let finite = ynew.iter().all(|x| x.is_finite()) && err.iter().all(|x| x.is_finite());
        let enorm = if finite {
            scaled_rms(&err, &y, Some(&ynew), tol)
        } else {
            f64::INFINITY
        };

        if enorm <= 1.0 {
            if !admissible(&ynew) {
                // locate the boundary crossing before giving up
                if h <= EXIT_RESOLUTION * t.abs().max(1.0) {
                    return Err(OdeFailure::Inadmissible { t });
                }
                h *= 0.5;
                last_rejected = true;
                continue;
            }
            let mut c = vec![0.0; 5 * n];
            for i in 0..n {
                let ydiff = ynew[i] - y[i];
                let bspl = h * k[0][i] - ydiff;
                c[i] = y[i];
                c[n + i] = ydiff;
                c[2 * n + i] = bspl;
                c[3 * n + i] = ydiff - h * k[6][i] - bspl;
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    acc += D[j] * kj[i];
                }
                c[4 * n + i] = h * acc;
            }
            sol.cont.extend_from_slice(&c);
            t = if last { t_end } else { t + h };
            sol.ts.push(t);
            sol.ys.extend_from_slice(&ynew);
            y.copy_from_slice(&ynew);
            let k6 = k[6].clone();
            k[0].copy_from_slice(&k6);

            let mut fac = SAFETY * enorm.max(1e-10).powf(-0.2);
            fac = fac.clamp(FAC_MIN, if last_rejected { 1.0 } else { FAC_MAX });
            h *= fac;
            last_rejected = false;
        } else {
            let fac = if enorm.is_finite() {
                (SAFETY * enorm.powf(-0.2)).max(FAC_MIN)
            } else {
                FAC_MIN
            };
            h *= fac;
            last_rejected = true;
        }
    }
    Ok(sol)
}

fn initial_step<F>(f: &mut F, y0: &[f64], f0: &[f64], t_end: f64, tol: f64) -> f64
where
    F: FnMut(&[f64], &mut [f64]),
{
    let d0 = scaled_rms(y0, y0, None, tol) * tol;
    let d1 = scaled_rms(f0, y0, None, tol) * tol;
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(t_end);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, d)| y + h0 * d).collect();
    let mut f1 = vec![0.0; y0.len()];
    f(&y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = scaled_rms(&diff, y0, None, tol) * tol / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(0.2)
    };
    (100.0 * h0).min(h1).min(t_end)
}
