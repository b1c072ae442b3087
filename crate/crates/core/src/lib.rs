//! Numerical search and certification of closed timelike geodesics on
//! chart-defined Lorentzian manifolds.

pub mod cli;
pub mod covering;
pub mod error;
pub mod geodesic;
pub mod hillclimb;
pub mod jacobi;
pub mod loopspace;
pub mod manifold;
pub mod ode;

pub use error::{Error, Result};
