//! Minimal dense-tensor arithmetic over `f64` with reverse-mode gradients.
//!
//! Every operation returns a fresh immutable [`Tensor`]. When any input tracks
//! gradients the result records a backward closure, and [`Tensor::backward`]
//! walks the resulting DAG once in reverse topological order. Only leaf tensors
//! (created with [`Tensor::param`]) keep a persistent gradient buffer.

mod error;
pub mod gradcheck;
mod ops;
mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, finite_difference_check_many, finite_difference_check_sampled};
pub use rng::{Rng, RngState};
pub use tensor::Tensor;
