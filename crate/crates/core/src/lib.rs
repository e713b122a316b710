//! Engine for simulating the programming of quantized neural-network weights
//! onto noisy multi-level memory devices, with sensitivity-ranked selective
//! write-verify.

pub mod device;
pub mod error;
pub mod nn;
pub mod quant;
pub mod stats;
pub mod swim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
