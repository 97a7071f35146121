//! Per-frame silhouette CNN and the SMPL parameter MLP.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::nn::{BatchNorm, Conv2d, Ctx, Linear, ParamStore};
use crate::numerics::{Real, Tensor, Var};

/// Maps `(B, T, H, W)` masks to `(B, C, T, H', W')` features, applying the
/// same 2D network to every frame.
pub trait SilhouetteBackbone<S: Real>: Send + Sync {
    /// `(C, H', W')` produced for the configured input size.
    fn output_geometry(&self) -> (usize, usize, usize);

    fn forward(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
    pool: bool,
}

/// Three conv3×3-BN-relu blocks, 2×2 max-pool after the first two.
#[derive(Clone, Debug)]
pub struct ReferenceCnn {
    blocks: Vec<ConvBlock>,
    channels: usize,
    height: usize,
    width: usize,
}

impl ReferenceCnn {
    pub fn new<S: Real>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut c_in = 1;
        let blocks = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let name = format!("encoder.block{}", i + 1);
                let block = ConvBlock {
                    conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c, 3, 1, 1, rng),
                    bn: BatchNorm::new(store, &format!("{name}.bn"), c),
                    pool: i < 2,
                };
                c_in = c;
                block
            })
            .collect();
        Self {
            blocks,
            channels: c_in,
            height: cfg.height,
            width: cfg.width,
        }
    }
}

impl<S: Real> SilhouetteBackbone<S> for ReferenceCnn {
    fn output_geometry(&self) -> (usize, usize, usize) {
        (self.channels, self.height / 4, self.width / 4)
    }

    fn forward(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[2] != self.height || shape[3] != self.width {
            return Err(Error::validation(format!(
                "silhouette batch {shape:?} does not match (B, T, {}, {})",
                self.height, self.width
            )));
        }
        let (b, t) = (shape[0], shape[1]);
        let mut h = ctx.tape.reshape(x, &[b * t, 1, self.height, self.width])?;
        for blk in &self.blocks {
            h = blk.conv.forward(ctx, h)?;
            h = ctx.batch_norm(h, &blk.bn)?;
            h = ctx.tape.relu(h);
            if blk.pool {
                h = ctx.tape.max_pool2d(h)?;
            }
        }
        let s = ctx.tape.shape(h).to_vec();
        let h = ctx.tape.reshape(h, &[b, t, s[1], s[2], s[3]])?;
        Ok(ctx.tape.permute(h, &[0, 2, 1, 3, 4])?)
    }
}

/// Rejects anything but 0/1 values.
pub fn check_binary<S: Real>(x: &Tensor<S>) -> Result<()> {
    match x.data().iter().position(|&v| v != S::zero() && v != S::one()) {
        Some(i) => Err(Error::validation(format!("silhouette value {} at {i} is not binary", x.data()[i]))),
        None => Ok(()),
    }
}

/// FC→BN→relu→dropout twice, then a final FC; BN pools over all B·T frames.
/// The two FCs feeding batch norm carry no bias.
#[derive(Clone, Debug)]
pub struct SmplEncoder {
    fc: [Linear; 3],
    bn: [BatchNorm; 2],
    dropout: f64,
    in_dim: usize,
    out_dim: usize,
}

impl SmplEncoder {
    pub fn new<S: Real>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let [h1, h2] = [cfg.smpl_hidden[0], cfg.smpl_hidden[1]];
        Self {
            fc: [
                Linear::new(store, "smpl.fc1", cfg.smpl_dim, h1, false, rng),
                Linear::new(store, "smpl.fc2", h1, h2, false, rng),
                Linear::new(store, "smpl.fc3", h2, cfg.smpl_embed, true, rng),
            ],
            bn: [BatchNorm::new(store, "smpl.bn1", h1), BatchNorm::new(store, "smpl.bn2", h2)],
            dropout: cfg.smpl_dropout,
            in_dim: cfg.smpl_dim,
            out_dim: cfg.smpl_embed,
        }
    }

    /// `(B, T, D) -> (B, T, D')`.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, y: Var) -> Result<Var> {
        let shape = ctx.tape.shape(y).to_vec();
        if shape.len() != 3 || shape[2] != self.in_dim {
            return Err(Error::validation(format!(
                "SMPL batch {shape:?} does not match (B, T, {})",
                self.in_dim
            )));
        }
        let (b, t) = (shape[0], shape[1]);
        let mut h = ctx.tape.reshape(y, &[b * t, self.in_dim])?;
        for i in 0..2 {
            h = self.fc[i].forward(ctx, h)?;
            h = ctx.batch_norm(h, &self.bn[i])?;
            h = ctx.tape.relu(h);
            h = ctx.dropout(h, self.dropout)?;
        }
        let h = self.fc[2].forward(ctx, h)?;
        Ok(ctx.tape.reshape(h, &[b, t, self.out_dim])?)
    }
}
