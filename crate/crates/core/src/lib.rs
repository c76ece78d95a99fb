//! Particle transport along gradient flows of f-divergences, with neural
//! density-ratio estimation, kernel baselines and evaluation metrics.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod divergences;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod parallel;
pub mod plot;
pub mod ratio_fit;
pub mod rng;
pub mod tensor;
pub mod transport;

pub use error::{EptError, Result};
pub use tensor::Tensor;
