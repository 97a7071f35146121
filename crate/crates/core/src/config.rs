//! Model, training, loss, and data settings, read from and written to
//! TOML with `[model]`, `[train]`, `[loss]`, and `[data]` sections.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Three conv blocks built in this crate.
    ReferenceCnn,
    /// Caller-supplied backbone implementing `SilhouetteBackbone`.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Conv block widths; the last one is the feature channel count C.
    pub channels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub smpl_dim: usize,
    pub smpl_hidden: Vec<usize>,
    /// D'; must equal the squared padded spatial side.
    pub smpl_embed: usize,
    pub smpl_dropout: f64,
    /// Task-token width M.
    pub token_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub token_sigma: f64,
    /// C'', the per-part embedding width.
    pub part_dim: usize,
    pub age_classes: usize,
    pub sex_classes: usize,
    pub bmi_classes: usize,
    /// Task-token attention blocks; off selects the direct MLP heads.
    pub task_fusion: bool,
    pub self_attention: bool,
    /// Off forces the SMPL matrix to zero, so fusion is the identity.
    pub smpl_fusion: bool,
    pub direct_hidden: usize,
    /// Identities seen by the training classifier; set by `train`.
    pub num_train_ids: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::ReferenceCnn,
            channels: vec![16, 32, 32],
            height: 64,
            width: 44,
            smpl_dim: 82,
            smpl_hidden: vec![128, 256],
            smpl_embed: 256,
            smpl_dropout: 0.2,
            token_dim: 512,
            heads: 4,
            blocks: 2,
            token_sigma: 0.02,
            part_dim: 256,
            age_classes: 5,
            sex_classes: 2,
            bmi_classes: 4,
            task_fusion: true,
            self_attention: true,
            smpl_fusion: true,
            direct_hidden: 256,
            num_train_ids: 0,
        }
    }
}

impl ModelConfig {
    /// Full-width reference encoder: C = 512 feature channels.
    pub fn full_scale() -> Self {
        Self {
            channels: vec![16, 32, 512],
            ..Self::default()
        }
    }

    /// Tiny configuration for finite-difference checks: B=2, C=2, T=2,
    /// padded side 4, M=8. Tokens start at unit scale so their gradients
    /// stay well above finite-difference roundoff.
    pub fn micro() -> Self {
        Self {
            channels: vec![2, 2, 2],
            height: 16,
            width: 12,
            smpl_hidden: vec![6, 8],
            smpl_embed: 16,
            smpl_dropout: 0.2,
            token_dim: 8,
            token_sigma: 1.0,
            heads: 2,
            blocks: 2,
            part_dim: 3,
            direct_hidden: 6,
            num_train_ids: 2,
            ..Self::default()
        }
    }

    /// `(C, H', W')` of the silhouette features.
    pub fn feature_geometry(&self) -> (usize, usize, usize) {
        let c = self.channels.last().copied().unwrap_or(0);
        (c, self.height / 4, self.width / 4)
    }

    /// Side of the zero-padded square feature map; also the part count P.
    pub fn padded_side(&self) -> usize {
        let (_, h, w) = self.feature_geometry();
        h.max(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 3 || self.channels.contains(&0) {
            return Err(Error::config("model.channels needs three positive widths"));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::config("model.height and model.width must be at least 4"));
        }
        let side = self.padded_side();
        if self.smpl_embed != side * side {
            return Err(Error::config(format!(
                "model.smpl_embed = {} but fusion needs {side}² = {} (square of max(H', W'))",
                self.smpl_embed,
                side * side
            )));
        }
        if self.smpl_dim == 0 || self.smpl_hidden.len() != 2 || self.smpl_hidden.contains(&0) {
            return Err(Error::config("model.smpl_hidden needs two positive widths"));
        }
        if !(0.0..1.0).contains(&self.smpl_dropout) {
            return Err(Error::config("model.smpl_dropout must be in [0, 1)"));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model.token_dim = {} is not divisible by model.heads = {}",
                self.token_dim, self.heads
            )));
        }
        if self.blocks == 0 {
            return Err(Error::config("model.blocks must be at least 1"));
        }
        if self.token_sigma < 0.0 || !self.token_sigma.is_finite() {
            return Err(Error::config("model.token_sigma must be nonnegative"));
        }
        if self.part_dim == 0 || self.direct_hidden == 0 {
            return Err(Error::config("model.part_dim and model.direct_hidden must be positive"));
        }
        if self.age_classes == 0 || self.sex_classes == 0 || self.bmi_classes == 0 {
            return Err(Error::config("attribute class counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub subjects_per_batch: usize,
    pub seqs_per_subject: usize,
    pub frames: usize,
    pub margin: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            iterations: 200_000,
            subjects_per_batch: 16,
            seqs_per_subject: 4,
            frames: 30,
            margin: 0.2,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("train.lr > 0, 0 <= train.momentum < 1, train.weight_decay >= 0"));
        }
        if self.subjects_per_batch == 0 || self.seqs_per_subject == 0 || self.frames == 0 {
            return Err(Error::config("batch geometry must be positive"));
        }
        if self.margin < 0.0 {
            return Err(Error::config("train.margin must be nonnegative"));
        }
        Ok(())
    }
}

/// Weights of the five loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_triplet: f64,
    pub alpha_ce: f64,
    pub beta_age: f64,
    pub beta_sex: f64,
    pub beta_bmi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::with_beta(0.01)
    }
}

impl LossWeights {
    /// α₁ = α₂ = 1 with one shared attribute weight.
    pub fn with_beta(beta: f64) -> Self {
        Self {
            alpha_triplet: 1.0,
            alpha_ce: 1.0,
            beta_age: beta,
            beta_sex: beta,
            beta_bmi: beta,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.alpha_triplet, self.alpha_ce, self.beta_age, self.beta_sex, self.beta_bmi]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config(format!("loss weights must be nonnegative, got {:?}", self.as_array())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest split used for training.
    pub train_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_split: "train".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
}

pub const SEED_ENV: &str = "COMBOGAIT_SEED";

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    /// Applies `COMBOGAIT_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}
