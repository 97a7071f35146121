//! Reverse-mode differentiation by operation recording.
//!
//! Every operation appends a node holding its output value and enough
//! saved state to replay the adjoint. Nodes are appended after their
//! inputs, so walking the node list backwards is a valid reverse
//! topological order.

use rand::Rng;

use super::tensor::{broadcast_index_map, broadcast_shapes, numel, strides};
use super::{Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode uses batch statistics and live dropout; eval mode is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics for a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Real> BnStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const NORM_EPS: f64 = 1e-5;

type Vjp<S> = Box<dyn Fn(&Tensor<S>, &[&Tensor<S>]) -> Vec<Tensor<S>>>;

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    /// `arg[i]` is the flat input index selected for output `i`.
    MaxAxis { x: Var, arg: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    MatMul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    MaxPool2d { x: Var, arg: Vec<usize> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    MaskMul { x: Var, mask: Vec<S> },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    /// `map[i]` is the input flat index feeding output `i`.
    Gather { x: Var, map: Vec<usize> },
    Pad2 { x: Var },
    PairwiseDist(Var),
    Custom { inputs: Vec<Var>, vjp: Vjp<S> },
}

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
    op: Op<S>,
}

/// Ordered record of executed operations.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn add_into<S: Real>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Sum with eight independent accumulators so the loop vectorizes.
fn lane_sum<S: Real>(x: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let mut chunks = x.chunks_exact(8);
    for c in &mut chunks {
        for k in 0..8 {
            acc[k] += c[k];
        }
    }
    acc.iter().copied().sum::<S>() + chunks.remainder().iter().copied().sum::<S>()
}

/// `Σ f(a_i, b_i)` with eight accumulators.
fn lane_sum2<S: Real>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> S {
    let mut acc = [S::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += f(x[k], y[k]);
        }
    }
    let tail: S = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| f(x, y)).sum();
    acc.iter().copied().sum::<S>() + tail
}

/// Element count of `src` when it broadcasts to `out` purely as a trailing
/// block (leading unit axes ignored).
fn suffix_block(src: &[usize], out: &[usize]) -> Option<usize> {
    let lead = src.iter().take_while(|&&d| d == 1).count();
    let core = &src[lead..];
    (core.len() <= out.len() && out.ends_with(core)).then(|| numel(core))
}

/// Row-major copy of `data` with axes reordered by `perm`.
fn permute_data<S: Real>(data: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // trailing axes left in place move as contiguous blocks
    let mut keep = nd;
    while keep > 0 && perm[keep - 1] == keep - 1 {
        keep -= 1;
    }
    let block = numel(&shape[keep..]);
    let in_strides = strides(shape);
    let eff: Vec<usize> = perm[..keep].iter().map(|&p| in_strides[p]).collect();
    let outer_shape = &out_shape[..keep];
    let n_outer = numel(outer_shape);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; keep];
    let mut off = 0usize;
    for _ in 0..n_outer {
        out.extend_from_slice(&data[off..off + block]);
        for d in (0..keep).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < outer_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn relu<S: Real>(v: S) -> S {
    // never produces -0.0
    if v > S::zero() {
        v
    } else {
        S::zero()
    }
}

/// (outer, axis extent, inner) split of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Output columns `[lo, hi)` whose input column `ox + kx - pad` is in
/// bounds, for unit stride.
fn unit_stride_span(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(wo);
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Real>(
    img: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [S],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &img[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    if stride == 1 {
                        let (lo, hi) = unit_stride_span(kx, pad, w, wo);
                        line[..lo].iter_mut().for_each(|v| *v = S::zero());
                        if lo < hi {
                            line[lo..hi].copy_from_slice(&src[lo + kx - pad..hi + kx - pad]);
                        }
                        line[hi.max(lo)..].iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Real>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    img: &mut [S],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    if stride == 1 {
                        let (lo, hi) = unit_stride_span(kx, pad, w, wo);
                        if lo < hi {
                            let dst = &mut img[base + lo + kx - pad..base + hi + kx - pad];
                            add_into(dst, &src[oy * wo + lo..oy * wo + hi]);
                        }
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise --------------------------------------------------

    fn broadcast_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<(Tensor<S>, Vec<usize>), TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shapes(&sa, &sb).ok_or_else(|| shape_err(op, &sa, &sb))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<S> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if let (true, Some(k)) = (sa == out, suffix_block(&sb, &out)) {
            let mut d = Vec::with_capacity(va.len());
            for ch in va.chunks(k) {
                d.extend(ch.iter().zip(vb).map(|(&x, &y)| f(x, y)));
            }
            d
        } else if let (true, Some(k)) = (sb == out, suffix_block(&sa, &out)) {
            let mut d = Vec::with_capacity(vb.len());
            for ch in vb.chunks(k) {
                d.extend(va.iter().zip(ch).map(|(&x, &y)| f(x, y)));
            }
            d
        } else {
            let ma = broadcast_index_map(&sa, &out);
            let mb = broadcast_index_map(&sb, &out);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Ok((Tensor::new(&out, data)?, out))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, _) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, _) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, _) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&e| e * s).collect()).unwrap();
        self.push(t, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&e| relu(e)).collect()).unwrap();
        self.push(t, Op::Relu(x), &[x])
    }

    /// Multiply by a fixed mask (no gradient to the mask).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<S>) -> Result<Var, TensorError> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(shape_err("mask_mul", v.shape(), &[mask.len()]));
        }
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(v.shape(), data)?;
        Ok(self.push(t, Op::MaskMul { x, mask }, &[x]))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)`; identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = S::lit(1.0 / (1.0 - rate));
        let mask = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.mask_mul(x, mask)
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / S::lit(v.numel() as f64));
        self.push(t, Op::Mean(x), &[x])
    }

    fn reduced_shape(&self, op: &'static str, x: Var, axis: usize) -> Result<Vec<usize>, TensorError> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(invalid(op, format!("axis {axis} out of range for {shape:?}")));
        }
        let mut out: Vec<usize> = shape.to_vec();
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        Ok(out)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.reduced_shape("sum_axis", x, axis)?;
        let v = self.value(x);
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &v.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                add_into(&mut data[o * inner..(o + 1) * inner], src);
            }
        }
        let t = Tensor::new(&out, data)?;
        Ok(self.push(t, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.reduced_shape("mean_axis", x, axis)?;
        let v = self.value(x);
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &v.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                add_into(&mut data[o * inner..(o + 1) * inner], src);
            }
        }
        let inv = S::one() / S::lit(n as f64);
        data.iter_mut().for_each(|e| *e *= inv);
        let t = Tensor::new(&out, data)?;
        Ok(self.push(t, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Max over `axis`; the gradient goes to the first maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.reduced_shape("max_axis", x, axis)?;
        let v = self.value(x);
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let d = v.data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for a in 1..n {
                    let j = (o * n + a) * inner + i;
                    if d[j] > d[best] {
                        best = j;
                    }
                }
                data.push(d[best]);
                arg.push(best);
            }
        }
        let t = Tensor::new(&out, data)?;
        Ok(self.push(t, Op::MaxAxis { x, arg }, &[x]))
    }

    // ---- normalizing maps ---------------------------------------------

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            row.iter_mut().for_each(|e| *e /= z);
        }
        let t = Tensor::new(v.shape(), data).unwrap();
        self.push(t, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&e| (e - m).exp()).sum::<S>().ln() + m;
            row.iter_mut().for_each(|e| *e -= lse);
        }
        let t = Tensor::new(v.shape(), data).unwrap();
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let v = self.value(x);
        let n = *v.shape().last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", v.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let eps = S::lit(eps);
        let rows = v.numel() / n;
        let mut xhat = Vec::with_capacity(v.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.numel());
        let nn = S::lit(n as f64);
        for row in v.data().chunks(n) {
            let mean = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<S>() / nn;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (k, &e) in row.iter().enumerate() {
                let h = (e - mean) * is;
                xhat.push(h);
                out.push(g[k] * h + b[k]);
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Batch normalization of `x: (N, C, ...)` per channel `C`.
    ///
    /// Train mode normalizes by batch statistics (biased variance) and
    /// folds them into `stats` with momentum [`BN_MOMENTUM`]; the running
    /// variance uses the unbiased estimate. Eval mode normalizes by `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<S>,
        mode: Mode,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if shape.len() < 2 {
            return Err(invalid("batch_norm", format!("expected (N, C, ...), got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner = numel(&shape[2..]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(shape_err("batch_norm", &shape, self.shape(gamma)));
        }
        let count = n * inner;
        let train = mode == Mode::Train;
        if train && count < 2 {
            return Err(TensorError::DegenerateBatch(count));
        }
        let d = v.data();
        let eps = S::lit(eps);
        let mut inv_std = vec![S::zero(); c];
        let mut mean = vec![S::zero(); c];
        if train {
            let cnt = S::lit(count as f64);
            let mut var = vec![S::zero(); c];
            for ch in 0..c {
                let plane = |b: usize| &d[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                let m = (0..n).map(|b| lane_sum(plane(b))).sum::<S>() / cnt;
                let q = (0..n)
                    .map(|b| lane_sum2(plane(b), plane(b), |x, _| (x - m) * (x - m)))
                    .sum::<S>();
                mean[ch] = m;
                var[ch] = q / cnt;
                inv_std[ch] = S::one() / (var[ch] + eps).sqrt();
            }
            let mom = S::lit(BN_MOMENTUM);
            let unbias = cnt / S::lit(count as f64 - 1.0);
            for ch in 0..c {
                stats.mean[ch] = mom * stats.mean[ch] + (S::one() - mom) * mean[ch];
                stats.var[ch] = mom * stats.var[ch] + (S::one() - mom) * var[ch] * unbias;
            }
        } else {
            for ch in 0..c {
                mean[ch] = stats.mean[ch];
                inv_std[ch] = S::one() / (stats.var[ch] + eps).sqrt();
            }
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); d.len()];
        let mut out = vec![S::zero(); d.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                let (m, is, ga, be) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for ((h, o), &e) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&d[r]) {
                    *h = (e - m) * is;
                    *o = ga * *h + be;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- linear algebra -----------------------------------------------

    /// Batched matrix product `(..., m, k)·(..., k, n)` with broadcast
    /// leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let bo = broadcast_shapes(ba, bb).ok_or_else(|| shape_err("matmul", &sa, &sb))?;
        let mut out_shape = bo.clone();
        out_shape.extend([m, n]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![S::zero(); numel(&out_shape)];
        if numel(bb) == 1 && ba == bo.as_slice() {
            S::gemm(numel(&bo) * m, k, n, va, false, vb, false, &mut out, false);
        } else {
            let ma = broadcast_index_map(ba, &bo);
            let mb = broadcast_index_map(bb, &bo);
            for (i, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                S::gemm(
                    m,
                    k,
                    n,
                    &va[ia * m * k..(ia + 1) * m * k],
                    false,
                    &vb[ib * k * n..(ib + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    /// Cross-correlation of `x: (N, Cin, H, W)` with `w: (Cout, Cin, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be at least 1"));
        }
        let (nb, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let kk = ci * kh * kw;
        let p = ho * wo;
        let (vx, vw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![S::zero(); nb * co * p];
        let mut col = vec![S::zero(); kk * p];
        for i in 0..nb {
            im2col(&vx[i * ci * h * wd..(i + 1) * ci * h * wd], ci, h, wd, kh, kw, stride, pad, ho, wo, &mut col);
            S::gemm(co, kk, p, vw, false, &col, false, &mut out[i * co * p..(i + 1) * co * p], false);
        }
        let t = Tensor::new(&[nb, co, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, stride, pad }, &[x, w]))
    }

    /// 2×2 max pooling with stride 2 over the last two axes (floor).
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 2] < 2 || s[s.len() - 1] < 2 {
            return Err(invalid("max_pool2d", format!("input {s:?} smaller than the 2x2 window")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (ho, wo) = (h / 2, w / 2);
        let planes = numel(&s[..s.len() - 2]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut arg = Vec::with_capacity(planes * ho * wo);
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..ho {
                let r0 = base + 2 * oy * w;
                let (top, bot) = (&d[r0..r0 + w], &d[r0 + w..r0 + 2 * w]);
                for ox in 0..wo {
                    let c = 2 * ox;
                    // scan order: (0,0), (0,1), (1,0), (1,1); first maximum wins
                    let (mut bv, mut bj) = (top[c], c);
                    if top[c + 1] > bv {
                        (bv, bj) = (top[c + 1], c + 1);
                    }
                    if bot[c] > bv {
                        (bv, bj) = (bot[c], w + c);
                    }
                    if bot[c + 1] > bv {
                        (bv, bj) = (bot[c + 1], w + c + 1);
                    }
                    out.push(bv);
                    arg.push(r0 + bj);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([ho, wo]);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MaxPool2d { x, arg }, &[x]))
    }

    // ---- layout -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    fn gather_with(&mut self, x: Var, shape: &[usize], map: Vec<usize>) -> Result<Var, TensorError> {
        let d = self.value(x).data();
        let data = map.iter().map(|&i| d[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather { x, map }, &[x]))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != shape.len() || seen != (0..shape.len()).collect::<Vec<_>>() {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(x).data(), &shape, perm);
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(invalid("transpose", "needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                map.extend((o * n + a) * inner..(o * n + a + 1) * inner);
            }
        }
        let mut out = shape;
        out[axis] = len;
        self.gather_with(x, &out, map)
    }

    /// Pick flat entries of `x`; output is 1-D.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(invalid("gather", format!("index {bad} out of range for {n} elements")));
        }
        if indices.is_empty() {
            return Err(invalid("gather", "empty index list"));
        }
        self.gather_with(x, &[indices.len()], indices.to_vec())
    }

    /// Repeat `x` to `shape` under broadcasting rules; backward sums.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let src = self.shape(x).to_vec();
        match broadcast_shapes(&src, shape) {
            Some(s) if s == shape => {}
            _ => return Err(shape_err("broadcast_to", &src, shape)),
        }
        let map = broadcast_index_map(&src, shape);
        self.gather_with(x, shape, map)
    }

    /// Zero-pad the last two axes on the bottom/right to `(h, w)`.
    pub fn pad2(&mut self, x: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 2] > h || s[s.len() - 1] > w {
            return Err(shape_err("pad2", &s, &[h, w]));
        }
        let (ih, iw) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s[..s.len() - 2]);
        let d = self.value(x).data();
        let mut out = vec![S::zero(); planes * h * w];
        for p in 0..planes {
            for r in 0..ih {
                out[p * h * w + r * w..p * h * w + r * w + iw]
                    .copy_from_slice(&d[p * ih * iw + r * iw..p * ih * iw + (r + 1) * iw]);
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([h, w]);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Pad2 { x }, &[x]))
    }

    /// Euclidean distances between rows: `(..., n, c) -> (..., n, n)`.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(invalid("pairwise_distance", "needs (..., n, c)"));
        }
        let (n, c) = (s[s.len() - 2], s[s.len() - 1]);
        let groups = numel(&s[..s.len() - 2]);
        let d = self.value(x).data();
        let mut out = vec![S::zero(); groups * n * n];
        for g in 0..groups {
            let base = g * n * c;
            for i in 0..n {
                for j in (i + 1)..n {
                    let xi = &d[base + i * c..base + (i + 1) * c];
                    let xj = &d[base + j * c..base + (j + 1) * c];
                    let dist = xi.iter().zip(xj).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>().sqrt();
                    out[g * n * n + i * n + j] = dist;
                    out[g * n * n + j * n + i] = dist;
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([n, n]);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::PairwiseDist(x), &[x]))
    }

    /// Operation with a caller-supplied vector-Jacobian product.
    ///
    /// `vjp(grad_out, inputs)` must return one gradient per input, shaped
    /// like that input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<S>,
        vjp: impl Fn(&Tensor<S>, &[&Tensor<S>]) -> Vec<Tensor<S>> + 'static,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                vjp: Box::new(vjp),
            },
            inputs,
        )
    }

    // ---- reverse pass -------------------------------------------------

    /// Propagate d(loss)/d(·) to every trainable leaf; gradients add onto
    /// whatever earlier calls left there.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<S>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (input, grad) in self.node_vjp(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => add_into(acc, &grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn zeros_like(&self, v: Var) -> Vec<S> {
        vec![S::zero(); self.value(v).numel()]
    }

    fn reduce_broadcast(&self, g: &[S], src: Var, out_shape: &[usize]) -> Vec<S> {
        let ss = self.shape(src);
        if ss == out_shape {
            return g.to_vec();
        }
        if let Some(k) = suffix_block(ss, out_shape) {
            let mut r = self.zeros_like(src);
            for ch in g.chunks(k) {
                add_into(&mut r, ch);
            }
            return r;
        }
        let map = broadcast_index_map(ss, out_shape);
        let mut r = self.zeros_like(src);
        for (&i, &e) in map.iter().zip(g) {
            r[i] += e;
        }
        r
    }

    fn node_vjp(&self, id: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, self.reduce_broadcast(g, *a, out_shape)),
                (*b, self.reduce_broadcast(g, *b, out_shape)),
            ],
            Op::Sub(a, b) => {
                let neg: Vec<S> = g.iter().map(|&e| -e).collect();
                vec![
                    (*a, self.reduce_broadcast(g, *a, out_shape)),
                    (*b, self.reduce_broadcast(&neg, *b, out_shape)),
                ]
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ma = broadcast_index_map(sa, out_shape);
                let mb = broadcast_index_map(sb, out_shape);
                let mut ga = self.zeros_like(*a);
                let mut gb = self.zeros_like(*b);
                for (k, &e) in g.iter().enumerate() {
                    ga[ma[k]] += e * vb[mb[k]];
                    gb[mb[k]] += e * va[ma[k]];
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|&e| e * *s).collect())],
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(y)
                    .map(|(&e, &o)| if o > S::zero() { e } else { S::zero() })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / S::lit(n as f64); n])]
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    S::one() / S::lit(n as f64)
                } else {
                    S::one()
                };
                let mut gx = self.zeros_like(*x);
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            gx[(o * n + a) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::MaxAxis { x, arg } | Op::MaxPool2d { x, arg } => {
                let mut gx = self.zeros_like(*x);
                for (&j, &e) in arg.iter().zip(g) {
                    gx[j] += e;
                }
                vec![(*x, gx)]
            }
            Op::Softmax(x) => {
                let n = *out_shape.last().unwrap();
                let mut gx = vec![S::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for k in 0..n {
                        dst[k] = yr[k] * (gr[k] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmax(x) => {
                let n = *out_shape.last().unwrap();
                let mut gx = vec![S::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let total: S = gr.iter().copied().sum();
                    for k in 0..n {
                        dst[k] = gr[k] - yr[k].exp() * total;
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = *out_shape.last().unwrap();
                let gam = self.value(*gamma).data();
                let mut gx = vec![S::zero(); g.len()];
                let mut gg = vec![S::zero(); n];
                let mut gbeta = vec![S::zero(); n];
                let nn = S::lit(n as f64);
                for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut s1 = S::zero();
                    let mut s2 = S::zero();
                    for k in 0..n {
                        let dh = gr[k] * gam[k];
                        s1 += dh;
                        s2 += dh * hr[k];
                        gg[k] += gr[k] * hr[k];
                        gbeta[k] += gr[k];
                    }
                    let is = inv_std[r];
                    for k in 0..n {
                        let dh = gr[k] * gam[k];
                        gx[r * n + k] = is / nn * (nn * dh - s1 - hr[k] * s2);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c) = (out_shape[0], out_shape[1]);
                let inner = numel(&out_shape[2..]);
                let gam = self.value(*gamma).data();
                let mut gx = vec![S::zero(); g.len()];
                let mut gg = vec![S::zero(); c];
                let mut gbeta = vec![S::zero(); c];
                let cnt = S::lit((n * inner) as f64);
                for ch in 0..c {
                    let range = |b: usize| (b * c + ch) * inner..(b * c + ch + 1) * inner;
                    for b in 0..n {
                        gg[ch] += lane_sum2(&g[range(b)], &xhat[range(b)], |u, v| u * v);
                        gbeta[ch] += lane_sum(&g[range(b)]);
                    }
                    // with dh = g·γ: Σdh = γ·Σg and Σdh·x̂ = γ·Σg·x̂
                    let (s1, s2) = (gbeta[ch] * gam[ch], gg[ch] * gam[ch]);
                    let is = inv_std[ch];
                    let (gm, k) = (gam[ch], is / cnt);
                    for b in 0..n {
                        let r = range(b);
                        for ((o, &e), &h) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                            let dh = e * gm;
                            *o = if *train { k * (cnt * dh - s1 - h * s2) } else { dh * is };
                        }
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::MaskMul { x, mask } => vec![(*x, g.iter().zip(mask).map(|(&e, &m)| e * m).collect())],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, permute_data(g, out_shape, &inv))]
            }
            Op::Gather { x, map } => {
                let mut gx = self.zeros_like(*x);
                for (&i, &e) in map.iter().zip(g) {
                    gx[i] += e;
                }
                vec![(*x, gx)]
            }
            Op::Pad2 { x } => {
                let s = self.shape(*x);
                let (ih, iw) = (s[s.len() - 2], s[s.len() - 1]);
                let (h, w) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                let planes = numel(&s[..s.len() - 2]);
                let mut gx = self.zeros_like(*x);
                for p in 0..planes {
                    for r in 0..ih {
                        gx[p * ih * iw + r * iw..p * ih * iw + (r + 1) * iw]
                            .copy_from_slice(&g[p * h * w + r * w..p * h * w + r * w + iw]);
                    }
                }
                vec![(*x, gx)]
            }
            Op::MatMul { a, b } => self.matmul_vjp(*a, *b, g, out_shape),
            Op::Conv2d { x, w, stride, pad } => self.conv_vjp(*x, *w, *stride, *pad, g, out_shape),
            Op::PairwiseDist(x) => {
                let s = self.shape(*x);
                let (n, c) = (s[s.len() - 2], s[s.len() - 1]);
                let groups = numel(&s[..s.len() - 2]);
                let d = self.value(*x).data();
                let mut gx = self.zeros_like(*x);
                for gi in 0..groups {
                    let base = gi * n * c;
                    for i in 0..n {
                        for j in 0..n {
                            let dist = y[gi * n * n + i * n + j];
                            if i == j || dist == S::zero() {
                                continue;
                            }
                            let coef = g[gi * n * n + i * n + j] / dist;
                            for k in 0..c {
                                let diff = d[base + i * c + k] - d[base + j * c + k];
                                gx[base + i * c + k] += coef * diff;
                                gx[base + j * c + k] -= coef * diff;
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Custom { inputs, vjp } => {
                let gt = Tensor::new(out_shape, g.to_vec()).unwrap();
                let vals: Vec<&Tensor<S>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = vjp(&gt, &vals);
                assert_eq!(grads.len(), inputs.len(), "custom vjp arity");
                inputs
                    .iter()
                    .zip(grads)
                    .map(|(&v, t)| {
                        assert_eq!(t.shape(), self.shape(v), "custom vjp gradient shape");
                        (v, t.into_data())
                    })
                    .collect()
            }
        }
    }

    fn matmul_vjp(&self, a: Var, b: Var, g: &[S], out_shape: &[usize]) -> Vec<(Var, Vec<S>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let bo = &out_shape[..out_shape.len() - 2];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut ga = self.zeros_like(a);
        let mut gb = self.zeros_like(b);
        if numel(bb) == 1 && ba == bo {
            let rows = numel(bo) * m;
            S::gemm(rows, n, k, g, false, vb, true, &mut ga, false);
            S::gemm(k, rows, n, va, true, g, false, &mut gb, false);
        } else {
            let ma = broadcast_index_map(ba, bo);
            let mb = broadcast_index_map(bb, bo);
            for (i, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                let gi = &g[i * m * n..(i + 1) * m * n];
                S::gemm(
                    m,
                    n,
                    k,
                    gi,
                    false,
                    &vb[ib * k * n..(ib + 1) * k * n],
                    true,
                    &mut ga[ia * m * k..(ia + 1) * m * k],
                    true,
                );
                S::gemm(
                    k,
                    m,
                    n,
                    &va[ia * m * k..(ia + 1) * m * k],
                    true,
                    gi,
                    false,
                    &mut gb[ib * k * n..(ib + 1) * k * n],
                    true,
                );
            }
        }
        vec![(a, ga), (b, gb)]
    }

    fn conv_vjp(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        g: &[S],
        out_shape: &[usize],
    ) -> Vec<(Var, Vec<S>)> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (nb, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let kk = ci * kh * kw;
        let p = ho * wo;
        let (vx, vw) = (self.value(x).data(), self.value(w).data());
        let need_x = self.requires_grad(x);
        let mut gx = if need_x { self.zeros_like(x) } else { Vec::new() };
        let mut gw = self.zeros_like(w);
        let mut col = vec![S::zero(); kk * p];
        let mut gcol = vec![S::zero(); kk * p];
        for i in 0..nb {
            let gi = &g[i * co * p..(i + 1) * co * p];
            im2col(&vx[i * ci * h * wd..(i + 1) * ci * h * wd], ci, h, wd, kh, kw, stride, pad, ho, wo, &mut col);
            S::gemm(co, p, kk, gi, false, &col, true, &mut gw, true);
            if need_x {
                S::gemm(kk, co, p, vw, true, gi, false, &mut gcol, false);
                col2im(&gcol, ci, h, wd, kh, kw, stride, pad, ho, wo, &mut gx[i * ci * h * wd..(i + 1) * ci * h * wd]);
            }
        }
        let mut r = vec![(w, gw)];
        if need_x {
            r.insert(0, (x, gx));
        }
        r
    }
}
