//! Hand-written deep-learning building blocks.
//!
//! Tensors are dense, row-major and generic over [`Scalar`] (`f32` for
//! training, `f64` for gradient checks). Image batches are laid out
//! `H × W × C × N` with the batch index fastest; flattened activations are
//! `[features × N]`.

pub mod datasets;
pub mod error;
pub mod experiments;
pub mod fft;
pub mod layers;
pub mod lstm;
pub mod network;
pub mod optim;
pub mod patches;
pub mod rl;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use tensor::{matmul, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
