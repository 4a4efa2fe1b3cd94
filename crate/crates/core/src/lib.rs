//! Bayesian nonparametric estimation of drug-combination effects on
//! multivariate longitudinal outcomes.

pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod features;
pub mod fit;
pub mod kernel;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod partition;
pub mod predict;
pub mod regimen;
pub mod simulate;

pub use error::{Error, Result};
