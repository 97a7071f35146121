//! Finite-difference checks of every differentiable operation, each layer,
//! and the composed micro model, all in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{LossWeights, ModelConfig};
use crate::data::{AttributeLabels, Batch};
use crate::encoders::{ReferenceCnn, SilhouetteBackbone, SmplEncoder};
use crate::error::{Error, Result};
use crate::fusion::{broadcast_channels, fuse, pad_to_square, smpl_to_matrix, temporal_pool};
use crate::model::ComboGait;
use crate::multitask::{hpp, FusionBlock, PartLinear};
use crate::numerics::nn::{Ctx, ParamStore};
use crate::numerics::{gradcheck_inputs, gradcheck_params, BnStats, Mode, Tape, Tensor, TensorError, Var, GRADCHECK_STEP};
use crate::training::{batch_all_triplet, batch_loss, combo_loss, cross_entropy, gait_ce};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Inputs drawn per operation in [`check_ops`].
pub const OP_SEEDS: u64 = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub max_relative_error: f64,
    /// Worst parameter or seed.
    pub worst: String,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE
    }
}

/// Weighted sum against a fixed non-uniform pattern, so every output
/// coordinate reaches the scalar with its own weight.
pub fn probe(tape: &mut Tape<f64>, y: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i * 7919 % 13) as f64 - 6.0) / 6.0 + 0.05);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

pub type OpBuild = fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>;

/// Every tape operation with input shapes of at most 64 elements.
pub fn op_registry() -> Vec<(&'static str, Vec<Vec<usize>>, OpBuild)> {
    vec![
        ("add", vec![vec![3, 4], vec![4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y)
        }),
        ("sub", vec![vec![2, 1, 3], vec![2, 3]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y)
        }),
        ("mul", vec![vec![2, 3], vec![2, 1]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y)
        }),
        ("scale", vec![vec![5]], |t, v| {
            let y = t.scale(v[0], -2.5);
            probe(t, y)
        }),
        ("relu", vec![vec![12]], |t, v| {
            let y = t.relu(v[0]);
            probe(t, y)
        }),
        ("sum", vec![vec![3, 3]], |t, v| {
            let s = t.sum(v[0]);
            t.mul(s, s)
        }),
        ("mean", vec![vec![3, 3]], |t, v| {
            let s = t.mean(v[0]);
            t.mul(s, s)
        }),
        ("sum_axis", vec![vec![2, 3, 4]], |t, v| {
            let y = t.sum_axis(v[0], 1)?;
            probe(t, y)
        }),
        ("mean_axis", vec![vec![2, 3, 4]], |t, v| {
            let y = t.mean_axis(v[0], 2)?;
            probe(t, y)
        }),
        ("max_axis", vec![vec![3, 5, 2]], |t, v| {
            let y = t.max_axis(v[0], 1)?;
            probe(t, y)
        }),
        ("softmax", vec![vec![3, 5]], |t, v| {
            let y = t.softmax(v[0]);
            probe(t, y)
        }),
        ("log_softmax", vec![vec![3, 5]], |t, v| {
            let y = t.log_softmax(v[0]);
            probe(t, y)
        }),
        ("matmul", vec![vec![2, 3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y)
        }),
        ("matmul_broadcast", vec![vec![2, 1, 2, 3], vec![3, 3, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y)
        }),
        ("conv2d", vec![vec![1, 2, 5, 4], vec![3, 2, 3, 3]], |t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1)?;
            probe(t, y)
        }),
        ("conv2d_strided", vec![vec![1, 2, 6, 5], vec![2, 2, 3, 3]], |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            probe(t, y)
        }),
        ("max_pool2d", vec![vec![2, 2, 3, 5]], |t, v| {
            let y = t.max_pool2d(v[0])?;
            probe(t, y)
        }),
        ("batch_norm_train", vec![vec![4, 3, 2], vec![3], vec![3]], |t, v| {
            let mut st = BnStats::new(3);
            let y = t.batch_norm(v[0], v[1], v[2], &mut st, Mode::Train, 1e-5)?;
            probe(t, y)
        }),
        ("batch_norm_eval", vec![vec![4, 3], vec![3], vec![3]], |t, v| {
            let mut st = BnStats {
                mean: vec![0.1, -0.2, 0.3],
                var: vec![0.5, 1.5, 2.0],
            };
            let y = t.batch_norm(v[0], v[1], v[2], &mut st, Mode::Eval, 1e-5)?;
            probe(t, y)
        }),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y)
        }),
        ("dropout_mask", vec![vec![6]], |t, v| {
            let y = t.mask_mul(v[0], vec![0.0, 2.0, 2.0, 0.0, 2.0, 2.0])?;
            probe(t, y)
        }),
        ("reshape", vec![vec![2, 6]], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            probe(t, y)
        }),
        ("permute", vec![vec![2, 3, 4]], |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            probe(t, y)
        }),
        ("transpose", vec![vec![2, 3, 4]], |t, v| {
            let y = t.transpose(v[0])?;
            probe(t, y)
        }),
        ("narrow", vec![vec![2, 5, 3]], |t, v| {
            let y = t.narrow(v[0], 1, 1, 3)?;
            probe(t, y)
        }),
        ("gather", vec![vec![3, 4]], |t, v| {
            let y = t.gather(v[0], &[0, 5, 5, 11, 2])?;
            probe(t, y)
        }),
        ("broadcast_to", vec![vec![2, 1, 3]], |t, v| {
            let y = t.broadcast_to(v[0], &[2, 4, 3])?;
            probe(t, y)
        }),
        ("pad2", vec![vec![2, 3, 2]], |t, v| {
            let y = t.pad2(v[0], 3, 3)?;
            probe(t, y)
        }),
        ("pairwise_distance", vec![vec![2, 4, 3]], |t, v| {
            let y = t.pairwise_distance(v[0])?;
            probe(t, y)
        }),
    ]
}

/// Each registered operation on `seeds` random input draws; one result per
/// operation holding the worst seed.
pub fn check_ops(seeds: u64) -> Result<Vec<OracleCheck>> {
    let mut out = Vec::new();
    for (name, shapes, build) in op_registry() {
        let mut worst = OracleCheck {
            name: format!("op/{name}"),
            max_relative_error: 0.0,
            worst: String::new(),
        };
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let xs: Vec<Tensor<f64>> = shapes.iter().map(|s| normal(s, &mut rng)).collect();
            let err = gradcheck_inputs(build, &xs, GRADCHECK_STEP)?;
            if err >= worst.max_relative_error {
                worst.max_relative_error = err;
                worst.worst = format!("seed {seed}");
            }
        }
        out.push(worst);
    }
    Ok(out)
}

fn param_check<F>(name: &str, store: &mut ParamStore<f64>, seed: u64, f: F) -> Result<OracleCheck>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let r = gradcheck_params(store, GRADCHECK_STEP, seed, f)?;
    Ok(OracleCheck {
        name: name.into(),
        max_relative_error: r.max_relative_error,
        worst: r.worst_param,
    })
}

fn binary_masks(shape: &[usize], density: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.random_bool(density) { 1.0 } else { 0.0 })
}

/// Encoders, fusion, attention block, pooling heads, and losses, each with
/// its inputs registered as parameters so their gradients are checked too.
pub fn check_layers(seed: u64) -> Result<Vec<OracleCheck>> {
    let cfg = ModelConfig::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let cnn = ReferenceCnn::new(&mut store, &cfg, &mut rng);
    let x = binary_masks(&[1, 2, cfg.height, cfg.width], 0.4, &mut rng);
    out.push(param_check("layer/reference_cnn", &mut store, seed, |ctx| {
        let x = ctx.input(x.clone());
        let y = cnn.forward(ctx, x)?;
        Ok(probe(&mut ctx.tape, y)?)
    })?);

    let mut store = ParamStore::new();
    let smpl = SmplEncoder::new(&mut store, &cfg, &mut rng);
    let y = store.add("input", normal(&[1, 3, cfg.smpl_dim], &mut rng));
    out.push(param_check("layer/smpl_mlp", &mut store, seed, |ctx| {
        let y = ctx.p(y);
        let e = smpl.forward(ctx, y)?;
        Ok(probe(&mut ctx.tape, e)?)
    })?);

    let s = normal(&[1, 2, 2, 4, 3], &mut rng);
    let e = normal(&[1, 2, 16], &mut rng);
    let err = gradcheck_inputs::<_, Error>(
        |t, v| {
            let sp = pad_to_square(t, v[0])?;
            let m = smpl_to_matrix(t, v[1], 4)?;
            let m = broadcast_channels(t, m, 2)?;
            let f = fuse(t, sp, m)?;
            let g = temporal_pool(t, f)?;
            Ok(probe(t, g)?)
        },
        &[s, e],
        GRADCHECK_STEP,
    )?;
    out.push(OracleCheck {
        name: "layer/fusion_chain".into(),
        max_relative_error: err,
        worst: "inputs".into(),
    });

    for self_attention in [true, false] {
        let bcfg = ModelConfig {
            self_attention,
            ..cfg.clone()
        };
        let mut store = ParamStore::new();
        let block = FusionBlock::new(&mut store, "block", &bcfg, 4, &mut rng)?;
        let tokens = store.add("tokens", normal(&[2, 3, bcfg.token_dim], &mut rng));
        let gait = store.add("gait", normal(&[2, 4, 4], &mut rng));
        let name = if self_attention {
            "layer/fusion_block"
        } else {
            "layer/fusion_block_cross_only"
        };
        out.push(param_check(name, &mut store, seed, |ctx| {
            let (t, g) = (ctx.p(tokens), ctx.p(gait));
            let o = block.forward(ctx, t, g)?;
            Ok(probe(&mut ctx.tape, o.out)?)
        })?);
    }

    let mut store = ParamStore::new();
    let head = PartLinear::new(&mut store, "gait_head", 4, 2, 3, &mut rng);
    let g = store.add("pooled", normal(&[2, 2, 4, 4], &mut rng));
    out.push(param_check("layer/hpp_gait_head", &mut store, seed, |ctx| {
        let g = ctx.p(g);
        let parts = hpp(&mut ctx.tape, g)?;
        let f = head.forward(ctx, parts)?;
        Ok(probe(&mut ctx.tape, f)?)
    })?);

    let f = normal(&[4, 3, 2], &mut rng);
    let err = gradcheck_inputs::<_, Error>(
        |t, v| batch_all_triplet(t, v[0], &[0, 0, 1, 1], 0.2),
        &[f],
        GRADCHECK_STEP,
    )?;
    out.push(OracleCheck {
        name: "loss/batch_all_triplet".into(),
        max_relative_error: err,
        worst: "inputs".into(),
    });

    let logits = normal(&[2, 3, 5], &mut rng);
    let err = gradcheck_inputs::<_, Error>(
        |t, v| gait_ce(t, v[0], &[4, 0, 2]),
        &[logits],
        GRADCHECK_STEP,
    )?;
    out.push(OracleCheck {
        name: "loss/gait_ce".into(),
        max_relative_error: err,
        worst: "inputs".into(),
    });

    let terms: Vec<Tensor<f64>> = [(3, 5), (3, 2), (3, 4)].iter().map(|&(b, n)| normal(&[b, n], &mut rng)).collect();
    let err = gradcheck_inputs::<_, Error>(
        |t, v| {
            let la = cross_entropy(t, v[0], &[4, 0, 1])?;
            let ls = cross_entropy(t, v[1], &[1, 1, 0])?;
            let lb = cross_entropy(t, v[2], &[3, 2, 0])?;
            let tri = t.mean(v[0]);
            let ce = t.mean(v[2]);
            let w = LossWeights {
                alpha_triplet: 1.0,
                alpha_ce: 0.5,
                beta_age: 0.3,
                beta_sex: 0.2,
                beta_bmi: 0.1,
            };
            let l = combo_loss(t, [tri, ce, la, ls, lb], &w)?;
            Ok(l.total)
        },
        &terms,
        GRADCHECK_STEP,
    )?;
    out.push(OracleCheck {
        name: "loss/attribute_ce_combo".into(),
        max_relative_error: err,
        worst: "inputs".into(),
    });
    Ok(out)
}

/// Random binary masks and SMPL vectors with the given identities.
pub fn micro_batch(cfg: &ModelConfig, ids: &[usize], frames: usize, rng: &mut ChaCha8Rng) -> Batch {
    let b = ids.len();
    let sil = binary_masks(&[b, frames, cfg.height, cfg.width], 0.4, rng).cast();
    let smpl = Tensor::from_fn(&[b, frames, cfg.smpl_dim], |_| 0.5 * rng.sample::<f64, _>(StandardNormal)).cast();
    let labels = ids
        .iter()
        .map(|_| AttributeLabels {
            age: rng.random_range(0..cfg.age_classes),
            sex: rng.random_range(0..cfg.sex_classes),
            bmi: rng.random_range(0..cfg.bmi_classes),
        })
        .collect();
    Batch {
        sil,
        smpl,
        ids: ids.to_vec(),
        labels,
        samples: (0..b).collect(),
    }
}

/// Every parameter of the model under the full five-term loss on a
/// random micro-batch of two frames per sequence.
pub fn check_model(name: &str, cfg: &ModelConfig, ids: &[usize], seed: u64) -> Result<OracleCheck> {
    check_model_step(name, cfg, ids, seed, GRADCHECK_STEP)
}

/// [`check_model`] with an explicit finite-difference step.
pub fn check_model_step(name: &str, cfg: &ModelConfig, ids: &[usize], seed: u64, h: f64) -> Result<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = cfg.clone();
    cfg.num_train_ids = ids.iter().max().map_or(1, |m| m + 1).max(cfg.num_train_ids);
    let mut model = ComboGait::<f64>::new(&cfg, &mut rng)?;
    let batch = micro_batch(&cfg, ids, 2, &mut rng);
    let weights = LossWeights::default();
    let ComboGait { arch, store } = &mut model;
    let r = gradcheck_params::<_, Error>(store, h, seed, |ctx| Ok(batch_loss(arch, ctx, &batch, 0.2, &weights)?.1.total))?;
    Ok(OracleCheck {
        name: name.into(),
        max_relative_error: r.max_relative_error,
        worst: r.worst_param,
    })
}

/// Operations, layers, and the micro model (B=2, C=2, T=2, side 4, M=8,
/// two blocks of two heads) plus variants with active triplets and with
/// the direct attribute heads.
///
/// Central differences are only meaningful where the loss is smooth within
/// one step; the fixed seeds give micro-batches with no relu, max, or
/// hinge switch inside that radius.
pub fn run_suite() -> Result<Vec<OracleCheck>> {
    let mut out = check_ops(OP_SEEDS)?;
    out.extend(check_layers(11)?);
    let micro = ModelConfig::micro();
    out.push(check_model("model/micro", &micro, &[0, 1], 5)?);
    out.push(check_model("model/micro_triplets", &micro, &[0, 0, 1, 1], 4)?);
    let direct = ModelConfig {
        task_fusion: false,
        ..micro.clone()
    };
    out.push(check_model("model/micro_direct_heads", &direct, &[0, 0, 1, 1], 4)?);
    Ok(out)
}
