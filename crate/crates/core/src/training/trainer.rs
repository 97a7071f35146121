use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::losses::{batch_all_triplet, combo_loss, cross_entropy, gait_ce, LossTerms, TERM_NAMES};
use super::optim::Sgd;
use crate::config::{Config, LossWeights};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{Architecture, ComboGait, ForwardOutput};
use crate::numerics::nn::Ctx;
use crate::numerics::{Mode, Real, Tensor};

pub const TRACE_HEADER: [&str; 7] = [
    "iteration",
    "loss_total",
    "loss_tri",
    "loss_ce_gait",
    "loss_age",
    "loss_sex",
    "loss_bmi",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub tri: f64,
    pub ce_gait: f64,
    pub age: f64,
    pub sex: f64,
    pub bmi: f64,
}

/// Forward pass plus all five loss terms on one batch.
pub fn batch_loss<S: Real>(
    arch: &Architecture<S>,
    ctx: &mut Ctx<'_, S>,
    batch: &Batch,
    margin: f64,
    weights: &LossWeights,
) -> Result<(ForwardOutput, LossTerms)> {
    let sil: Tensor<S> = batch.sil.cast();
    let smpl: Tensor<S> = batch.smpl.cast();
    let out = arch.forward(ctx, &sil, &smpl)?;
    let tri = batch_all_triplet(&mut ctx.tape, out.f_gait, &batch.ids, margin)?;
    let ce = match out.id_logits {
        Some(l) => gait_ce(&mut ctx.tape, l, &batch.ids)?,
        None => return Err(Error::config("model.num_train_ids must be set to train")),
    };
    let age: Vec<usize> = batch.labels.iter().map(|l| l.age).collect();
    let sex: Vec<usize> = batch.labels.iter().map(|l| l.sex).collect();
    let bmi: Vec<usize> = batch.labels.iter().map(|l| l.bmi).collect();
    let la = cross_entropy(&mut ctx.tape, out.attrs.age, &age)?;
    let ls = cross_entropy(&mut ctx.tape, out.attrs.sex, &sex)?;
    let lb = cross_entropy(&mut ctx.tape, out.attrs.bmi, &bmi)?;
    let terms = combo_loss(&mut ctx.tape, [tri, ce, la, ls, lb], weights)?;
    Ok((out, terms))
}

/// Model, optimizer, and sampling state of one training run.
pub struct Trainer {
    pub config: Config,
    pub model: ComboGait<f32>,
    pub iteration: usize,
    opt: Sgd<f32>,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh model seeded from `config.train.seed` with an identity
    /// classifier over `num_ids` subjects.
    pub fn new(mut config: Config, num_ids: usize) -> Result<Self> {
        config.model.num_train_ids = num_ids;
        config.validate()?;
        let seed = config.train.seed;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let model = ComboGait::new(&config.model, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            opt: Sgd::from_config(&config.train),
            config,
            model,
            iteration: 0,
            rng,
        })
    }

    /// One sample → forward → loss → backward → update.
    pub fn step(&mut self, ds: &Dataset) -> Result<LossRecord> {
        let t = &self.config.train;
        let batch = ds.sample_batch(t.subjects_per_batch, t.seqs_per_subject, t.frames, &mut self.rng)?;
        self.iteration += 1;
        let (margin, weights) = (t.margin, self.config.loss);
        self.model.store.zero_grad();
        let arch = &self.model.arch;
        let mut ctx = Ctx::new(&mut self.model.store, Mode::Train, &mut self.rng);
        let (_, terms) = batch_loss(arch, &mut ctx, &batch, margin, &weights)?;
        let vals: Vec<f64> = terms.terms().iter().map(|&v| ctx.tape.value(v).data()[0].as_f64()).collect();
        if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: self.iteration,
                term: TERM_NAMES[k],
            });
        }
        let total = ctx.tape.value(terms.total).data()[0].as_f64();
        if !total.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iteration,
                term: "loss_total",
            });
        }
        ctx.tape.backward(terms.total)?;
        ctx.accumulate_grads();
        drop(ctx);
        self.opt.step(&mut self.model.store);
        Ok(LossRecord {
            iteration: self.iteration,
            total,
            tri: vals[0],
            ce_gait: vals[1],
            age: vals[2],
            sex: vals[3],
            bmi: vals[4],
        })
    }

    /// Runs `config.train.iterations` steps, checkpointing to `checkpoint`
    /// every `checkpoint_every` iterations when both are set.
    pub fn run(&mut self, ds: &Dataset, checkpoint: Option<&Path>) -> Result<Vec<LossRecord>> {
        let n = self.config.train.iterations;
        let every = self.config.train.checkpoint_every;
        let mut trace = Vec::with_capacity(n);
        for _ in 0..n {
            let rec = self.step(ds)?;
            if rec.iteration % 100 == 0 || rec.iteration == 1 {
                log::info!("iteration {} loss {:.5}", rec.iteration, rec.total);
            }
            trace.push(rec);
            if let (Some(path), true) = (checkpoint, every > 0 && self.iteration % every == 0) {
                save_checkpoint(path, &self.config, &self.model)?;
            }
        }
        Ok(trace)
    }
}

pub fn write_loss_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for r in trace {
        w.write_record([
            r.iteration.to_string(),
            r.total.to_string(),
            r.tri.to_string(),
            r.ce_gait.to_string(),
            r.age.to_string(),
            r.sex.to_string(),
            r.bmi.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
