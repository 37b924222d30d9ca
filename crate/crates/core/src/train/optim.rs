use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub constant_iters: usize,
    pub poly_iters: usize,
    pub poly_power: f64,
    pub batch_size: usize,
    /// Skip weight decay on normalization affine and mixture parameters.
    pub exempt_norm_decay: bool,
    /// Seeds initialization and batch order.
    pub seed: u64,
}

impl Default for OptimConfig {
    /// 2000 iterations split 1 : 7 : 17 between warmup, constant and poly.
    fn default() -> Self {
        OptimConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_iters: 80,
            constant_iters: 560,
            poly_iters: 1360,
            poly_power: 0.9,
            batch_size: 4,
            exempt_norm_decay: false,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn total_iters(&self) -> usize {
        self.warmup_iters + self.constant_iters + self.poly_iters
    }

    pub fn validate(&self) -> Result<()> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.base_lr) {
            return Err(Error::Config(format!("optim.base_lr must be positive, got {}", self.base_lr)));
        }
        if !finite_pos(self.poly_power) {
            return Err(Error::Config(format!(
                "optim.poly_power must be positive, got {}",
                self.poly_power
            )));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!("optim.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "optim.weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learning rate at a 0-based iteration: linear warmup to `base_lr`, a
/// constant phase, then `base_lr·(1 − t/P)^power` with `t` counted from the
/// start of the poly phase.
pub fn lr_at(cfg: &OptimConfig, iter: usize) -> Result<f64> {
    let total = cfg.total_iters();
    if iter >= total {
        return Err(Error::invalid(format!("iteration {iter} outside schedule of {total}")));
    }
    let (w, k) = (cfg.warmup_iters, cfg.constant_iters);
    Ok(if iter < w {
        cfg.base_lr * (iter + 1) as f64 / w as f64
    } else if iter < w + k {
        cfg.base_lr
    } else {
        let t = (iter - w - k) as f64;
        cfg.base_lr * (1.0 - t / cfg.poly_iters as f64).powf(cfg.poly_power)
    })
}

/// One momentum-SGD update of a flat parameter:
/// `g = grad + wd·p; v = μ·v + g; p −= lr·v`.
pub fn sgd_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Momentum buffers for every learnable entry of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    velocity: Vec<Option<Tensor>>,
}

impl SgdState {
    pub fn new(store: &ParamStore) -> Result<Self> {
        let velocity = store
            .entries()
            .iter()
            .map(|e| {
                e.kind
                    .learnable()
                    .then(|| Tensor::zeros(e.tensor.shape()))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(SgdState { velocity })
    }
}

/// Apply [`sgd_update`] to every learnable entry. `grads` follows store
/// order; a missing gradient counts as zero. Any non-finite gradient aborts
/// before a single parameter is touched.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut SgdState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.velocity.len() != store.len() {
        return Err(Error::invalid("gradient list does not match the parameter store"));
    }
    for (e, g) in store.entries().iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != e.tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd step",
                    lhs: e.tensor.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", e.name)));
            }
        }
    }
    for ((e, g), v) in store.entries_mut().iter_mut().zip(grads).zip(&mut state.velocity) {
        let Some(v) = v else { continue };
        let decay = match e.kind {
            ParamKind::NormAffine | ParamKind::Switch if cfg.exempt_norm_decay => 0.0,
            _ => cfg.weight_decay,
        };
        let zeros;
        let grad = match g {
            Some(g) => g.data(),
            None => {
                zeros = vec![0.0; e.tensor.numel()];
                &zeros
            }
        };
        sgd_update(e.tensor.data_mut(), grad, v.data_mut(), lr, cfg.momentum, decay);
    }
    Ok(())
}
