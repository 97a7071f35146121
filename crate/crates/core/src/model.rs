//! The assembled network: encoders, fusion, task-token blocks, and heads.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderKind, ModelConfig};
use crate::encoders::{check_binary, ReferenceCnn, SilhouetteBackbone, SmplEncoder};
use crate::error::{Error, Result};
use crate::fusion::{fuse, pad_to_square, smpl_to_matrix, temporal_pool};
use crate::multitask::{
    gait_tokens, hpp, init_task_tokens, run_blocks, AttributeHeads, AttributeVars, BlockOutput, DirectHeads,
    FusionBlock, PartLinear, TASKS,
};
use crate::numerics::nn::{Ctx, ParamId, ParamStore};
use crate::numerics::{Mode, Real, Tensor, Var};

/// Layer wiring; parameter values live in a separate [`ParamStore`].
#[derive(Clone)]
pub struct Architecture<S: Real> {
    pub config: ModelConfig,
    pub encoder: Arc<dyn SilhouetteBackbone<S>>,
    pub smpl: SmplEncoder,
    pub tokens: Option<ParamId>,
    pub blocks: Vec<FusionBlock>,
    pub attr_heads: Option<AttributeHeads>,
    pub direct_heads: Option<DirectHeads>,
    pub gait_head: PartLinear,
    /// Per-part identity classifier used only by the training loss.
    pub id_classifier: Option<PartLinear>,
    channels: usize,
    side: usize,
}

/// Tape handles of every named intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub e_sil: Var,
    pub e_smpl: Var,
    pub s_padded: Var,
    /// `(B, 1, T, Hmax, Hmax)` SMPL matrix; the fusion product broadcasts
    /// it over channels.
    pub smpl_matrix: Var,
    pub e_fused: Var,
    pub g_fused: Var,
    pub g_tilde: Var,
    pub f_gait: Var,
    pub blocks: Vec<BlockOutput>,
    pub t_hat: Option<Var>,
    pub t_tilde: Option<Var>,
    pub attrs: AttributeVars,
    /// Part-major identity logits `(P, B, N)`.
    pub id_logits: Option<Var>,
}

impl<S: Real> Architecture<S> {
    fn build(
        cfg: &ModelConfig,
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        encoder: Arc<dyn SilhouetteBackbone<S>>,
    ) -> Result<Self> {
        let (c, h, w) = encoder.output_geometry();
        let side = h.max(w);
        if cfg.smpl_embed != side * side {
            return Err(Error::config(format!(
                "smpl_embed = {} but the encoder's {h}x{w} features need {side}² = {}",
                cfg.smpl_embed,
                side * side
            )));
        }
        let smpl = SmplEncoder::new(store, cfg, rng);
        let (tokens, blocks, attr_heads, direct_heads) = if cfg.task_fusion {
            let tokens = init_task_tokens(store, TASKS.len(), cfg.token_dim, cfg.token_sigma, rng);
            let blocks = (0..cfg.blocks)
                .map(|i| FusionBlock::new(store, &format!("block{}", i + 1), cfg, c, rng))
                .collect::<Result<Vec<_>>>()?;
            (Some(tokens), blocks, Some(AttributeHeads::new(store, cfg, rng)), None)
        } else {
            (None, Vec::new(), None, Some(DirectHeads::new(store, cfg, c * side, rng)))
        };
        let gait_head = PartLinear::new(store, "gait_head", side, c, cfg.part_dim, rng);
        let id_classifier =
            (cfg.num_train_ids > 0).then(|| PartLinear::new(store, "id_classifier", side, cfg.part_dim, cfg.num_train_ids, rng));
        Ok(Self {
            config: cfg.clone(),
            encoder,
            smpl,
            tokens,
            blocks,
            attr_heads,
            direct_heads,
            gait_head,
            id_classifier,
            channels: c,
            side,
        })
    }

    /// `(C', Hmax)`: fused channel count and padded side (= part count).
    pub fn geometry(&self) -> (usize, usize) {
        (self.channels, self.side)
    }

    /// Full forward pass on `(B, T, H, W)` masks and `(B, T, D)` SMPL.
    pub fn forward(&self, ctx: &mut Ctx<'_, S>, sil: &Tensor<S>, smpl: &Tensor<S>) -> Result<ForwardOutput> {
        let (ss, sp) = (sil.shape(), smpl.shape());
        if ss.len() != 4 || sp.len() != 3 {
            return Err(Error::validation(format!(
                "expected (B, T, H, W) silhouettes and (B, T, D) SMPL, got {ss:?} and {sp:?}"
            )));
        }
        if ss[..2] != sp[..2] {
            return Err(Error::data(format!(
                "silhouette batch {ss:?} and SMPL batch {sp:?} are not frame-aligned"
            )));
        }
        check_binary(sil)?;
        let x = ctx.input(sil.clone());
        let y = ctx.input(smpl.clone());
        self.forward_vars(ctx, x, y)
    }

    /// Forward pass from inputs already on the tape.
    pub fn forward_vars(&self, ctx: &mut Ctx<'_, S>, x: Var, y: Var) -> Result<ForwardOutput> {
        let e_sil = self.encoder.forward(ctx, x)?;
        let e_smpl = self.smpl.forward(ctx, y)?;
        let s_padded = pad_to_square(&mut ctx.tape, e_sil)?;
        let smpl_matrix = if self.config.smpl_fusion {
            smpl_to_matrix(&mut ctx.tape, e_smpl, self.side)?
        } else {
            let mut shape = ctx.tape.shape(s_padded).to_vec();
            shape[1] = 1;
            ctx.input(Tensor::zeros(&shape))
        };
        let e_fused = fuse(&mut ctx.tape, s_padded, smpl_matrix)?;
        let g_fused = temporal_pool(&mut ctx.tape, e_fused)?;
        let g_tilde = hpp(&mut ctx.tape, g_fused)?;
        let f_gait = self.gait_head.forward(ctx, g_tilde)?;

        let (blocks, t_hat, t_tilde, attrs) = match (&self.attr_heads, &self.direct_heads, self.tokens) {
            (Some(heads), _, Some(tok)) => {
                let b = ctx.tape.shape(g_fused)[0];
                let gt = gait_tokens(&mut ctx.tape, g_fused)?;
                let tok = ctx.p(tok);
                let tok = ctx.tape.broadcast_to(tok, &[b, TASKS.len(), self.config.token_dim])?;
                let blocks = run_blocks(ctx, &self.blocks, tok, gt)?;
                let last = *blocks.last().expect("at least one block");
                let attrs = heads.forward(ctx, last.out)?;
                (blocks, Some(last.cross), Some(last.out), attrs)
            }
            (_, Some(direct), _) => (Vec::new(), None, None, direct.forward(ctx, g_tilde)?),
            _ => unreachable!("architecture has either task tokens or direct heads"),
        };
        let id_logits = match &self.id_classifier {
            Some(clf) => Some(clf.forward_part_major(ctx, f_gait)?),
            None => None,
        };
        Ok(ForwardOutput {
            e_sil,
            e_smpl,
            s_padded,
            smpl_matrix,
            e_fused,
            g_fused,
            g_tilde,
            f_gait,
            blocks,
            t_hat,
            t_tilde,
            attrs,
            id_logits,
        })
    }
}

/// Embedding and attribute predictions for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `F_gait` flattened part-major: `P` blocks of `C''` values.
    pub embedding: Vec<f32>,
    pub age_logits: Vec<f32>,
    pub sex_logits: Vec<f32>,
    pub bmi_logits: Vec<f32>,
    pub age: usize,
    pub sex: usize,
    pub bmi: usize,
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Parameters plus wiring.
#[derive(Clone)]
pub struct ComboGait<S: Real> {
    pub arch: Architecture<S>,
    pub store: ParamStore<S>,
}

impl<S: Real> ComboGait<S> {
    /// Builds the reference-encoder model with parameters drawn from `rng`.
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.encoder == EncoderKind::External {
            return Err(Error::config("an external encoder must be supplied through ComboGait::with_backbone"));
        }
        let mut store = ParamStore::new();
        let enc = Arc::new(ReferenceCnn::new(&mut store, cfg, rng));
        let arch = Architecture::build(cfg, &mut store, rng, enc)?;
        Ok(Self { arch, store })
    }

    /// Builds around a caller-supplied silhouette backbone, which registers
    /// its own parameters in the store it is handed.
    pub fn with_backbone<F>(cfg: &ModelConfig, rng: &mut ChaCha8Rng, backbone: F) -> Result<Self>
    where
        F: FnOnce(&mut ParamStore<S>, &mut ChaCha8Rng) -> Arc<dyn SilhouetteBackbone<S>>,
    {
        let mut store = ParamStore::new();
        let enc = backbone(&mut store, rng);
        let mut cfg = cfg.clone();
        cfg.encoder = EncoderKind::External;
        let arch = Architecture::build(&cfg, &mut store, rng, enc)?;
        Ok(Self { arch, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Same weights in another precision (reference encoder only).
    pub fn cast<T: Real>(&self) -> Result<ComboGait<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ComboGait::<T>::new(&self.arch.config, &mut rng)?;
        m.store = self.store.cast();
        Ok(m)
    }

    /// Eval-mode pass over a batch; returns one [`Inference`] per row.
    pub fn infer_batch(&mut self, sil: &Tensor<S>, smpl: &Tensor<S>) -> Result<Vec<Inference>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx::new(&mut self.store, Mode::Eval, &mut rng);
        let out = self.arch.forward(&mut ctx, sil, smpl)?;
        let f = ctx.tape.permute(out.f_gait, &[0, 2, 1])?;
        let b = sil.shape()[0];
        let rows = |v: Var| -> Vec<Vec<f32>> {
            let t = ctx.tape.value(v);
            let n = t.numel() / b;
            t.data().chunks(n).map(|c| c.iter().map(|x| x.as_f64() as f32).collect()).collect()
        };
        let (emb, age, sex, bmi) = (rows(f), rows(out.attrs.age), rows(out.attrs.sex), rows(out.attrs.bmi));
        Ok((0..b)
            .map(|i| Inference {
                age: argmax(&age[i]),
                sex: argmax(&sex[i]),
                bmi: argmax(&bmi[i]),
                embedding: emb[i].clone(),
                age_logits: age[i].clone(),
                sex_logits: sex[i].clone(),
                bmi_logits: bmi[i].clone(),
            })
            .collect())
    }
}
