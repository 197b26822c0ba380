//! Offline model-based optimization against a learned surrogate, with a
//! Wasserstein source critic whose penalty weight is chosen adaptively.

pub mod ascr;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gp;
pub mod nets;
pub mod optimizers;
pub mod rng;
pub mod selfcheck;
pub mod sobol;
pub mod tasks;
pub mod wasserstein;

pub(crate) mod sobol_table;

pub use error::{Error, Result};
