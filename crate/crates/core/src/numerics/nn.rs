//! Named parameters, per-forward binding context, and the basic layers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{BnStats, Mode, Real, Tape, Tensor, TensorError, Var, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<S> {
    pub name: String,
    pub stats: BnStats<S>,
}

/// Every learnable tensor plus batch-norm running statistics, in
/// registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    buffers: Vec<Buffer<S>>,
    names: BTreeMap<String, usize>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            names: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains_key(&name), "duplicate parameter {name}");
        self.names.insert(name.clone(), self.params.len());
        let grad = vec![S::zero(); value.numel()];
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, channels: usize) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            stats: BnStats::new(channels),
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn entry(&self, i: usize) -> &Param<S> {
        &self.params[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut Param<S> {
        &mut self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<S>> {
        self.names.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.names.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> &[Buffer<S>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<S>] {
        &mut self.buffers
    }

    pub fn buffer(&self, id: BufferId) -> &BnStats<S> {
        &self.buffers[id.0].stats
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn snapshot_buffers(&self) -> Vec<BnStats<S>> {
        self.buffers.iter().map(|b| b.stats.clone()).collect()
    }

    pub fn restore_buffers(&mut self, snap: Vec<BnStats<S>>) {
        for (b, s) in self.buffers.iter_mut().zip(snap) {
            b.stats = s;
        }
    }

    /// Same parameters in another precision.
    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.iter().map(|g| T::lit(g.as_f64())).collect(),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    stats: BnStats {
                        mean: b.stats.mean.iter().map(|v| T::lit(v.as_f64())).collect(),
                        var: b.stats.var.iter().map(|v| T::lit(v.as_f64())).collect(),
                    },
                })
                .collect(),
            names: self.names.clone(),
        }
    }
}

/// One forward pass: the tape, lazily bound parameters, mode, and the
/// generator driving dropout.
pub struct Ctx<'a, S: Real> {
    pub tape: Tape<S>,
    store: &'a mut ParamStore<S>,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, S: Real> Ctx<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, mode: Mode, rng: &'a mut ChaCha8Rng) -> Self {
        let n = store.len();
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            mode,
            rng,
        }
    }

    /// Tape handle for a parameter, recorded on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.store.get(id).value.clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.tape.constant(t)
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BatchNorm) -> Result<Var, TensorError> {
        let (g, b) = (self.p(bn.gamma), self.p(bn.beta));
        let stats = &mut self.store.buffers[bn.stats.0].stats;
        self.tape.batch_norm(x, g, b, stats, self.mode, NORM_EPS)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var, TensorError> {
        self.tape.dropout(x, rate, self.mode, &mut *self.rng)
    }

    /// Add tape gradients of every bound parameter onto the store.
    pub fn accumulate_grads(&mut self) {
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(g) = v.and_then(|v| self.tape.grad(v)) {
                for (d, s) in self.store.params[i].grad.iter_mut().zip(g) {
                    *d += *s;
                }
            }
        }
    }

    /// Parameters touched by this forward pass.
    pub fn bound_params(&self) -> Vec<ParamId> {
        (0..self.bound.len())
            .filter(|&i| self.bound[i].is_some())
            .map(ParamId)
            .collect()
    }
}

pub fn uniform_tensor<S: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<S> {
    let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| S::lit(d.sample(rng)))
}

pub fn normal_tensor<S: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<S> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| S::lit(d.sample(rng)))
}

/// `y = x·W + b` over the last axis; `W` is stored `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(&[fan_in, fan_out], bound, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform_tensor(&[fan_out], bound, rng)));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var, TensorError> {
        let w = ctx.p(self.weight);
        let y = ctx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Bias-free square-kernel convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(&[c_out, c_in, kernel, kernel], std, rng),
        );
        Self { weight, stride, pad }
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var, TensorError> {
        let w = ctx.p(self.weight);
        ctx.tape.conv2d(x, w, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
}

impl BatchNorm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            stats: store.add_buffer(format!("{name}.running"), channels),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var, TensorError> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.tape.layer_norm(x, g, b, NORM_EPS)
    }
}
