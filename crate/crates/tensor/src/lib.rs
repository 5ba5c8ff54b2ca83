//! Dense `f64` tensors with tape-based reverse-mode differentiation, the
//! AdamW optimizer, a cosine learning-rate schedule and a binary checkpoint
//! format. Everything here is single-threaded and deterministic.

pub mod checkpoint;
mod error;
mod gemm;
pub mod gradcheck;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
