//! Batch-all triplet, identity and attribute cross-entropy, and their
//! weighted sum.

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Every `(anchor, positive, negative)` index triple of a labelled batch.
pub fn valid_triplets(ids: &[usize]) -> Vec<(usize, usize, usize)> {
    let n = ids.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || ids[p] != ids[a] {
                continue;
            }
            for q in 0..n {
                if ids[q] != ids[a] {
                    out.push((a, p, q));
                }
            }
        }
    }
    out
}

/// Batch-all triplet loss on `f: (B, C'', P)`.
///
/// Per part: mean of `d_ap - d_an + margin` over triplets where it is
/// positive (0 when none are); then the mean over parts. A batch without
/// any valid triplet yields a constant 0.
pub fn batch_all_triplet<S: Real>(tape: &mut Tape<S>, f: Var, ids: &[usize], margin: f64) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 || s[0] != ids.len() {
        return Err(Error::validation(format!("triplet loss needs (B, C, P) with B = {}, got {s:?}", ids.len())));
    }
    let (b, parts) = (s[0], s[2]);
    let triplets = valid_triplets(ids);
    if triplets.is_empty() {
        log::warn!("batch has no valid triplet; triplet loss is 0");
        return Ok(tape.constant(Tensor::scalar(S::zero())));
    }
    let fp = tape.permute(f, &[2, 0, 1])?;
    let d = tape.pairwise_distance(fp)?;
    let mut ap = Vec::with_capacity(parts * triplets.len());
    let mut an = Vec::with_capacity(parts * triplets.len());
    for p in 0..parts {
        for &(a, q, n) in &triplets {
            ap.push(p * b * b + a * b + q);
            an.push(p * b * b + a * b + n);
        }
    }
    let dap = tape.gather(d, &ap)?;
    let dan = tape.gather(d, &an)?;
    let diff = tape.sub(dap, dan)?;
    let m = tape.constant(Tensor::scalar(S::lit(margin)));
    let hinge = tape.add(diff, m)?;
    let hinge = tape.relu(hinge);
    let hv = tape.value(hinge).data().to_vec();
    let nt = triplets.len();
    let mut w = vec![S::zero(); hv.len()];
    for p in 0..parts {
        let block = &hv[p * nt..(p + 1) * nt];
        let active = block.iter().filter(|&&x| x > S::zero()).count();
        if active == 0 {
            continue;
        }
        let wp = S::lit(1.0 / (active as f64 * parts as f64));
        for (i, &x) in block.iter().enumerate() {
            if x > S::zero() {
                w[p * nt + i] = wp;
            }
        }
    }
    let weighted = tape.mask_mul(hinge, w)?;
    Ok(tape.sum(weighted))
}

/// Mean softmax cross-entropy of `logits: (..., N)` rows against `labels`.
pub fn cross_entropy<S: Real>(tape: &mut Tape<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let n = *s.last().ok_or_else(|| Error::validation("cross-entropy on a scalar"))?;
    let rows = tape.value(logits).numel() / n;
    if rows != labels.len() {
        return Err(Error::validation(format!("{rows} logit rows for {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Label(format!("class {bad} out of range for {n} classes")));
    }
    let ls = tape.log_softmax(logits);
    let idx: Vec<usize> = labels.iter().enumerate().map(|(r, &l)| r * n + l).collect();
    let picked = tape.gather(ls, &idx)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -S::one()))
}

/// Identity cross-entropy on part-major logits `(P, B, N)`, averaged over
/// parts and batch.
pub fn gait_ce<S: Real>(tape: &mut Tape<S>, logits: Var, ids: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 3 || s[1] != ids.len() {
        return Err(Error::validation(format!("identity logits must be (P, {}, N), got {s:?}", ids.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= s[2]) {
        return Err(Error::Label(format!("identity {bad} unknown to a classifier over {} identities", s[2])));
    }
    let labels: Vec<usize> = (0..s[0]).flat_map(|_| ids.iter().copied()).collect();
    cross_entropy(tape, logits, &labels)
}

/// Tape handles of the five loss terms and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub tri: Var,
    pub ce_gait: Var,
    pub age: Var,
    pub sex: Var,
    pub bmi: Var,
    pub total: Var,
}

pub const TERM_NAMES: [&str; 5] = ["loss_tri", "loss_ce_gait", "loss_age", "loss_sex", "loss_bmi"];

impl LossTerms {
    pub fn terms(&self) -> [Var; 5] {
        [self.tri, self.ce_gait, self.age, self.sex, self.bmi]
    }
}

/// `α₁·tri + α₂·ce + β₁·age + β₂·sex + β₃·bmi`.
pub fn combo_loss<S: Real>(tape: &mut Tape<S>, terms: [Var; 5], w: &LossWeights) -> Result<LossTerms> {
    w.validate()?;
    let ws = w.as_array();
    let mut total = tape.scale(terms[0], S::lit(ws[0]));
    for k in 1..5 {
        let t = tape.scale(terms[k], S::lit(ws[k]));
        total = tape.add(total, t)?;
    }
    Ok(LossTerms {
        tri: terms[0],
        ce_gait: terms[1],
        age: terms[2],
        sex: terms[3],
        bmi: terms[4],
        total,
    })
}
