use crate::config::TrainConfig;
use crate::numerics::nn::ParamStore;
use crate::numerics::Real;

/// SGD with heavy-ball momentum and L2 decay folded into the velocity:
/// `v ← μv + (g + λp)`, `p ← p − ηv`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<S> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<S>>,
}

impl<S: Real> Sgd<S> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.momentum, cfg.weight_decay)
    }

    pub fn step(&mut self, store: &mut ParamStore<S>) {
        if self.velocity.is_empty() {
            self.velocity = store.iter().map(|p| vec![S::zero(); p.value.numel()]).collect();
        }
        let (lr, mu, wd) = (S::lit(self.lr), S::lit(self.momentum), S::lit(self.weight_decay));
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            let grad = &p.grad;
            for ((x, g), vi) in p.value.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
                *vi = mu * *vi + (*g + wd * *x);
                *x -= lr * *vi;
            }
        }
    }
}
