//! Experiment harness: MNIST loading, quantization-aware training, Monte
//! Carlo sweeps over programming strategies, the weight-perturbation
//! correlation study and report generation.

pub mod config;
pub mod correlate;
pub mod experiment;
pub mod mnist;
pub mod models;
pub mod report;
pub mod sweep;
pub mod synthetic;
pub mod train;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] nvcim_core::Error),
    #[error(transparent)]
    Idx(#[from] mnist::IdxError),
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("training diverged at epoch {epoch}, step {step} (loss {loss})")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("{path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
