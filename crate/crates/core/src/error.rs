use thiserror::Error;

/// Errors raised across the engine.
///
/// The CLI maps these onto exit codes: domain and configuration problems exit
/// with 1, solver non-convergence with 2.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("point {point:?} is outside the chart domain of {model}")]
    Domain { model: String, point: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("integration failed at parameter {last_t}: {reason}")]
    Integration { reason: String, last_t: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        best_base: Vec<f64>,
        best_comp: Vec<f64>,
    },

    #[error("singular shooting jacobian (condition number {cond:e}) at base {base:?}")]
    SingularJacobian { cond: f64, base: Vec<f64> },

    #[error("radial inversion failed: {0}")]
    InversionFailure(String),

    #[error("degenerate hill step (length change {delta_length:e})")]
    DegenerateStep { delta_length: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by leaving the chart, including integrator chart exits.
    pub fn is_chart_exit(&self) -> bool {
        match self {
            Error::Domain { .. } => true,
            Error::Integration { reason, .. } => reason.starts_with("chart exit"),
            _ => false,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NoConvergence { .. }
            | Error::SingularJacobian { .. }
            | Error::InversionFailure(_)
            | Error::DegenerateStep { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
