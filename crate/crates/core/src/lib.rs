pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod dimred;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod kernels;
pub mod linalg;
pub mod simulation;
pub mod smoothing;

pub use error::{EaseError, Result};
