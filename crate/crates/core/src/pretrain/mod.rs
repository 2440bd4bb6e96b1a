//! Joint masked reconstruction pretraining: per-modality decoders, the loss,
//! AdamW, the learning-rate schedule and the training loop.

mod config;
mod decoder;
mod loss;
mod model;
mod optim;
mod schedule;
mod trainer;

pub use config::{DecoderConfig, InputPolicy, TrainConfig};
pub use decoder::Decoder;
pub use loss::{mae_loss, normalize_patches};
pub use model::{av_mae_loss, AvMae, Losses};
pub use optim::AdamW;
pub use schedule::lr_schedule;
pub use trainer::{derive_seed, pretrain, DataSource, StepRecord, TrainState};
