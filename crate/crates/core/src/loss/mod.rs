//! Segmentation losses over `m` independent binary tasks, and IoU metrics.

mod lovasz;
mod metrics;

pub use lovasz::{jaccard_increments, lovasz_extension_oracle, lovasz_hinge_flat, DeltaRule};
pub use metrics::{binarize_logits, miou, IouAccumulator, IouReport};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logits on a tape paired with binary targets of the same `(N, m, H, W)`
/// shape. Targets may have several classes set at one pixel.
#[derive(Clone, Copy, Debug)]
pub struct BinaryTaskBatch<'t> {
    logits: Var,
    targets: &'t Tensor,
    targets_var: Var,
}

impl<'t> BinaryTaskBatch<'t> {
    pub fn new(g: &mut Graph, logits: Var, targets: &'t Tensor) -> Result<Self> {
        targets.dims4()?;
        if g.shape(logits) != targets.shape() {
            return Err(Error::ShapeMismatch {
                op: "binary task batch",
                lhs: g.shape(logits).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        if let Some(bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid(format!("targets must be 0 or 1, found {bad}")));
        }
        let targets_var = g.constant(targets.clone());
        Ok(BinaryTaskBatch {
            logits,
            targets,
            targets_var,
        })
    }

    pub fn logits(&self) -> Var {
        self.logits
    }

    pub fn targets(&self) -> &'t Tensor {
        self.targets
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Dice weight.
    pub lambda1: f64,
    /// Lovász weight.
    pub lambda2: f64,
    /// Lovász tasks per (image, class) rather than per class over the batch.
    pub per_image: bool,
    pub delta_rule: DeltaRule,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 0.0,
            per_image: true,
            delta_rule: DeltaRule::SortedLabels,
        }
    }
}

impl LossConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let cfg = LossConfig {
            lambda1,
            lambda2,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy, `softplus(s) − y·s` per slot.
pub fn bce_loss(g: &mut Graph, batch: &BinaryTaskBatch) -> Result<Var> {
    let sp = g.softplus(batch.logits);
    let ys = g.mul(batch.targets_var, batch.logits)?;
    let per_slot = g.sub(sp, ys)?;
    g.mean_all(per_slot)
}

/// Per-pixel Dice, `−mean(2yσ/(y+σ))`. For binary `y` each term equals
/// `y·2σ/(1+σ)`, which keeps negative pixels at exactly 0 even when σ
/// underflows.
pub fn dice_loss(g: &mut Graph, batch: &BinaryTaskBatch) -> Result<Var> {
    let sig = g.sigmoid(batch.logits);
    let den = g.add_scalar(sig, 1.0);
    let ratio = g.div(sig, den)?;
    let terms = g.mul(ratio, batch.targets_var)?;
    let total = g.sum_all(terms)?;
    let n = batch.targets.numel() as f64;
    // The explicit +0.0 shift turns a −0 result into +0.
    Ok(g.affine(total, -2.0 / n, 0.0))
}

/// Lovász hinge averaged over tasks. Tasks are `(image, class)` pairs when
/// `per_image` is set, otherwise one task per class spanning the batch.
pub fn lovasz_hinge(g: &mut Graph, batch: &BinaryTaskBatch, per_image: bool, rule: DeltaRule) -> Result<Var> {
    let (n, m, h, w) = batch.targets.dims4()?;
    let hw = h * w;
    let y = batch.targets.data();
    let rows = g.reshape(batch.logits, &[n * m, hw])?;
    let mut losses = Vec::new();
    if per_image {
        for t in 0..n * m {
            let labels = &y[t * hw..(t + 1) * hw];
            let row = g.narrow(rows, 0, t, 1)?;
            let flat = g.reshape(row, &[hw])?;
            losses.push(lovasz_hinge_flat(g, flat, labels, rule)?);
        }
    } else {
        for c in 0..m {
            let mut parts = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n * hw);
            for i in 0..n {
                let t = i * m + c;
                labels.extend_from_slice(&y[t * hw..(t + 1) * hw]);
                let row = g.narrow(rows, 0, t, 1)?;
                parts.push(g.reshape(row, &[hw])?);
            }
            let flat = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
            losses.push(lovasz_hinge_flat(g, flat, &labels, rule)?);
        }
    }
    let tasks = losses.len() as f64;
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    Ok(g.scale(total, 1.0 / tasks))
}

/// `(BCE + λ1·Dice + λ2·Lovász) / (1 + λ1 + λ2)`. Terms with a zero weight
/// are not evaluated, so `λ1 = λ2 = 0` reproduces [`bce_loss`] exactly.
pub fn hybrid_loss(g: &mut Graph, batch: &BinaryTaskBatch, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let mut total = bce_loss(g, batch)?;
    if cfg.lambda1 != 0.0 {
        let dice = dice_loss(g, batch)?;
        let weighted = g.scale(dice, cfg.lambda1);
        total = g.add(total, weighted)?;
    }
    if cfg.lambda2 != 0.0 {
        let lov = lovasz_hinge(g, batch, cfg.per_image, cfg.delta_rule)?;
        let weighted = g.scale(lov, cfg.lambda2);
        total = g.add(total, weighted)?;
    }
    Ok(g.scale(total, 1.0 / (1.0 + cfg.lambda1 + cfg.lambda2)))
}

#[cfg(test)]
mod tests;
