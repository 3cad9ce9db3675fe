//! CPU training engine for convolutional classifiers with windowed
//! attention-pooling heads and global-pooling baselines.
//!
//! Everything numeric is generic over [`Scalar`] (`f64` or `f32`); the
//! aliases at the crate root pin the common instantiations.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod kernels;
pub mod kv;
pub mod model;
pub mod nn;
pub mod reference;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use head::{HeadConfig, HeadKind};
pub use model::{sha256_hex, Model, ModelConfig};
pub use nn::BackboneConfig;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
