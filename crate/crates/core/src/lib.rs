//! Gradient multi-subspace tuning.
pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gems;
pub mod harness;
pub mod linalg;
pub mod nullspace;
pub mod rng;
pub mod subspace;

pub use error::{GemsError, Result};
pub use linalg::Matrix;
