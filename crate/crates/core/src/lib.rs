//! Multi-modal semantic segmentation that stays usable when arbitrary
//! modalities are missing at test time.
//!
//! The library is generic over the floating point type; the aliases below fix
//! it to `f64` (default) or `f32`.

// `!(x >= 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod error;
pub mod eval;
pub mod head;
pub mod masm;
pub mod mim;
pub mod model;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type Model = model::Model<f64>;
pub type Trainer = train::Trainer<f64>;

pub type TensorF32 = tensor::Tensor<f32>;
pub type TapeF32 = tensor::Tape<f32>;
pub type ModelF32 = model::Model<f32>;
pub type TrainerF32 = train::Trainer<f32>;
