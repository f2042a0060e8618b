//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! Values are recorded on a [`Tape`] as primitives are applied; [`Tape::backward`]
//! sweeps the recording once in reverse and returns gradients for every parameter
//! and tracked leaf. Everything is generic over the [`Scalar`] type; the `*64`
//! aliases below are what the rest of the workspace uses.

mod checkpoint;
pub mod gradcheck;
mod error;
mod kernels;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
pub use error::{Result, TensorError};
pub use optim::{AdamW, AdamWConfig};
pub use params::{GradMap, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type GradMap64 = GradMap<f64>;
pub type AdamW64 = AdamW<f64>;

pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    tape::sigmoid(x)
}
