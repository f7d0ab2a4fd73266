//! Implicit class-conditioned domain alignment for unsupervised domain adaptation.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod divergence;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TapeF64 = Tape<f64>;
pub type TapeF32 = Tape<f32>;
pub type AdaptationModelF64 = nn::AdaptationModel<f64>;
pub type AdaptationModelF32 = nn::AdaptationModel<f32>;
