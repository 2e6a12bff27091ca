//! Dense row-major tensors with a reverse-mode gradient tape.
//!
//! Every operation produces a new immutable [`Tensor`]. When any input
//! requires a gradient the result records a backward closure, and
//! [`Tensor::backward`] replays those closures in reverse topological order.
//! Only the gradient buffers are mutable after construction.

mod checkpoint;
mod error;
pub mod flops;
mod nn;
mod ops;
mod optim;
mod param;
mod scalar;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use error::{Result, TensorError};
pub use ops::ReduceKind;
pub use optim::Sgd;
pub use param::{Binding, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
