//! Early-fusion audio-visual transformer with factorized interaction fusion,
//! joint masked-autoencoder pretraining, linear-probe evaluation and a
//! forward-pass efficiency benchmark. Everything is generic over the scalar
//! type; the `*32` / `*64` aliases below fix it.

pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod masking;
pub mod memory;
pub mod nn;
pub mod pretrain;
pub mod rawio;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod tokenize;

pub use autograd::{no_grad, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Var32 = Var<f32>;
pub type Var64 = Var<f64>;
pub type Encoder32 = encoder::Encoder<f32>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type AvMae32 = pretrain::AvMae<f32>;
pub type AvMae64 = pretrain::AvMae<f64>;
