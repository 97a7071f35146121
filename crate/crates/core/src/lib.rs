//! Combo-gait: silhouette and SMPL-parameter gait features fused by a
//! matrix product, refined by task-token attention blocks, and trained
//! jointly for identification and age/sex/BMI estimation.

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod multitask;
pub mod numerics;
pub mod oracle;
pub mod training;

pub use config::{Config, EncoderKind, LossWeights, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{Architecture, ComboGait, ForwardOutput, Inference};
