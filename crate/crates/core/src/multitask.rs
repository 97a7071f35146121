//! Task tokens, attention blocks, horizontal pooling, and prediction heads.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::nn::{normal_tensor, uniform_tensor, BatchNorm, Ctx, LayerNorm, Linear, ParamId, ParamStore};
use crate::numerics::{Real, Tape, Var};

/// Token order of the attribute tasks.
pub const TASKS: [&str; 3] = ["age", "sex", "bmi"];

/// `(J, M)` learnable tokens drawn from N(0, σ²).
pub fn init_task_tokens<S: Real>(
    store: &mut ParamStore<S>,
    j: usize,
    m: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> ParamId {
    store.add("tokens", normal_tensor(&[j, m], sigma, rng))
}

/// `(B, C, H, W) -> (B, H·W, C)`, positions row-major.
pub fn gait_tokens<S: Real>(tape: &mut Tape<S>, g: Var) -> Result<Var> {
    let s = tape.shape(g).to_vec();
    if s.len() != 4 {
        return Err(Error::validation(format!("expected (B, C, H, W), got {s:?}")));
    }
    let flat = tape.reshape(g, &[s[0], s[1], s[2] * s[3]])?;
    Ok(tape.permute(flat, &[0, 2, 1])?)
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value widths. The key projection has no bias: it would shift every
/// score of a row equally and drop out of the softmax.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("token width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    fn split<S: Real>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let x = tape.reshape(x, &[s[0], s[1], self.heads, self.dim / self.heads])?;
        Ok(tape.permute(x, &[0, 2, 1, 3])?)
    }

    /// Returns the projected output `(B, J, M)` and weights `(B, h, J, L)`.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, query: Var, kv: Var) -> Result<(Var, Var)> {
        let (b, j) = (ctx.tape.shape(query)[0], ctx.tape.shape(query)[1]);
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, kv)?;
        let v = self.v.forward(ctx, kv)?;
        let q = self.split(&mut ctx.tape, q)?;
        let k = self.split(&mut ctx.tape, k)?;
        let v = self.split(&mut ctx.tape, v)?;
        let kt = ctx.tape.transpose(k)?;
        let scores = ctx.tape.matmul(q, kt)?;
        let d = (self.dim / self.heads) as f64;
        let scores = ctx.tape.scale(scores, S::lit(1.0 / d.sqrt()));
        let w = ctx.tape.softmax(scores);
        let out = ctx.tape.matmul(w, v)?;
        let out = ctx.tape.permute(out, &[0, 2, 1, 3])?;
        let out = ctx.tape.reshape(out, &[b, j, self.dim])?;
        Ok((self.o.forward(ctx, out)?, w))
    }
}

/// Post-norm self-attention, cross-attention, and two-layer MLP.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub self_attn: Option<(Attention, LayerNorm)>,
    pub cross_attn: Attention,
    pub cross_norm: LayerNorm,
    pub mlp: [Linear; 2],
    pub mlp_norm: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    /// After the cross-attention sublayer.
    pub cross: Var,
    pub out: Var,
    pub self_weights: Option<Var>,
    pub cross_weights: Var,
}

impl FusionBlock {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &ModelConfig,
        gait_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let m = cfg.token_dim;
        let self_attn = if cfg.self_attention {
            Some((
                Attention::new(store, &format!("{name}.self"), m, m, cfg.heads, rng)?,
                LayerNorm::new(store, &format!("{name}.self_norm"), m),
            ))
        } else {
            None
        };
        Ok(Self {
            self_attn,
            cross_attn: Attention::new(store, &format!("{name}.cross"), m, gait_dim, cfg.heads, rng)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), m),
            mlp: [
                Linear::new(store, &format!("{name}.mlp1"), m, m, true, rng),
                Linear::new(store, &format!("{name}.mlp2"), m, m, true, rng),
            ],
            mlp_norm: LayerNorm::new(store, &format!("{name}.mlp_norm"), m),
        })
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, tokens: Var, gait: Var) -> Result<BlockOutput> {
        let mut t = tokens;
        let mut self_weights = None;
        if let Some((attn, norm)) = &self.self_attn {
            let (a, w) = attn.forward(ctx, t, t)?;
            let r = ctx.tape.add(t, a)?;
            t = norm.forward(ctx, r)?;
            self_weights = Some(w);
        }
        let (a, cross_weights) = self.cross_attn.forward(ctx, t, gait)?;
        let r = ctx.tape.add(t, a)?;
        let cross = self.cross_norm.forward(ctx, r)?;
        let h = self.mlp[0].forward(ctx, cross)?;
        let h = ctx.tape.relu(h);
        let h = self.mlp[1].forward(ctx, h)?;
        let r = ctx.tape.add(cross, h)?;
        let out = self.mlp_norm.forward(ctx, r)?;
        Ok(BlockOutput {
            cross,
            out,
            self_weights,
            cross_weights,
        })
    }
}

/// Applies `blocks` in order; one output per block.
pub fn run_blocks<S: Real>(
    ctx: &mut Ctx<'_, S>,
    blocks: &[FusionBlock],
    tokens: Var,
    gait: Var,
) -> Result<Vec<BlockOutput>> {
    if blocks.is_empty() {
        return Err(Error::config("at least one fusion block is required"));
    }
    let mut outs = Vec::with_capacity(blocks.len());
    let mut t = tokens;
    for blk in blocks {
        let o = blk.forward(ctx, t, gait)?;
        t = o.out;
        outs.push(o);
    }
    Ok(outs)
}

/// Row bands pooled by max + mean: `(B, C, H, W) -> (B, C, H)`.
pub fn hpp<S: Real>(tape: &mut Tape<S>, g: Var) -> Result<Var> {
    if tape.shape(g).len() != 4 {
        return Err(Error::validation(format!("expected (B, C, H, W), got {:?}", tape.shape(g))));
    }
    let mx = tape.max_axis(g, 3)?;
    let mn = tape.mean_axis(g, 3)?;
    Ok(tape.add(mx, mn)?)
}

/// One bias-free `(in, out)` matrix per part: `(B, in, P) -> (B, out, P)`.
#[derive(Clone, Debug)]
pub struct PartLinear {
    pub weight: ParamId,
}

impl PartLinear {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        parts: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(&[parts, fan_in, fan_out], bound, rng));
        Self { weight }
    }

    /// Part-major logits `(P, B, out)`.
    pub fn forward_part_major<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let xp = ctx.tape.permute(x, &[2, 0, 1])?;
        let w = ctx.p(self.weight);
        Ok(ctx.tape.matmul(xp, w)?)
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let y = self.forward_part_major(ctx, x)?;
        Ok(ctx.tape.permute(y, &[1, 2, 0])?)
    }
}

/// Logits of the three attribute tasks.
#[derive(Clone, Copy, Debug)]
pub struct AttributeVars {
    pub age: Var,
    pub sex: Var,
    pub bmi: Var,
}

/// One linear map per task token.
#[derive(Clone, Debug)]
pub struct AttributeHeads {
    pub heads: [Linear; 3],
}

impl AttributeHeads {
    pub fn new<S: Real>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let m = cfg.token_dim;
        Self {
            heads: [
                Linear::new(store, "head.age", m, cfg.age_classes, true, rng),
                Linear::new(store, "head.sex", m, cfg.sex_classes, true, rng),
                Linear::new(store, "head.bmi", m, cfg.bmi_classes, true, rng),
            ],
        }
    }

    /// `tokens: (B, 3, M)` in task order.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, tokens: Var) -> Result<AttributeVars> {
        let s = ctx.tape.shape(tokens).to_vec();
        if s.len() != 3 || s[1] != 3 {
            return Err(Error::validation(format!("expected (B, 3, M) task tokens, got {s:?}")));
        }
        let mut out = [tokens; 3];
        for (k, head) in self.heads.iter().enumerate() {
            let t = ctx.tape.narrow(tokens, 1, k, 1)?;
            let t = ctx.tape.reshape(t, &[s[0], s[2]])?;
            out[k] = head.forward(ctx, t)?;
        }
        Ok(AttributeVars {
            age: out[0],
            sex: out[1],
            bmi: out[2],
        })
    }
}

#[derive(Clone, Debug)]
struct Mlp3 {
    fc: [Linear; 3],
    bn: [BatchNorm; 2],
}

/// Baseline without task tokens: three MLPs over the flattened parts.
#[derive(Clone, Debug)]
pub struct DirectHeads {
    mlps: [Mlp3; 3],
    in_dim: usize,
}

impl DirectHeads {
    pub fn new<S: Real>(store: &mut ParamStore<S>, cfg: &ModelConfig, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.direct_hidden;
        let classes = [cfg.age_classes, cfg.sex_classes, cfg.bmi_classes];
        let mlps = std::array::from_fn(|k| {
            let name = format!("direct.{}", TASKS[k]);
            Mlp3 {
                fc: [
                    Linear::new(store, &format!("{name}.fc1"), in_dim, h, false, rng),
                    Linear::new(store, &format!("{name}.fc2"), h, h, false, rng),
                    Linear::new(store, &format!("{name}.fc3"), h, classes[k], true, rng),
                ],
                bn: [
                    BatchNorm::new(store, &format!("{name}.bn1"), h),
                    BatchNorm::new(store, &format!("{name}.bn2"), h),
                ],
            }
        });
        Self { mlps, in_dim }
    }

    /// `g: (B, C', P)`.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, g: Var) -> Result<AttributeVars> {
        let b = ctx.tape.shape(g)[0];
        let flat = ctx.tape.reshape(g, &[b, self.in_dim])?;
        let mut out = [flat; 3];
        for (k, mlp) in self.mlps.iter().enumerate() {
            let mut h = flat;
            for i in 0..2 {
                h = mlp.fc[i].forward(ctx, h)?;
                h = ctx.batch_norm(h, &mlp.bn[i])?;
                h = ctx.tape.relu(h);
            }
            out[k] = mlp.fc[2].forward(ctx, h)?;
        }
        Ok(AttributeVars {
            age: out[0],
            sex: out[1],
            bmi: out[2],
        })
    }
}
