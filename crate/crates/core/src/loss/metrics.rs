use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 1 where the logit is positive (σ(s) > 0.5), else 0.
pub fn binarize_logits(logits: &Tensor) -> Tensor {
    logits.map(|s| if s > 0.0 { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    pub per_class: Vec<f64>,
    /// Classes whose prediction and target were both empty; their IoU is 1.
    pub empty: Vec<bool>,
    pub mean: f64,
}

/// Per-class intersection and union counts summed over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct IouAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: usize) -> Self {
        IouAccumulator {
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "miou",
                lhs: pred.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let (n, m, h, w) = pred.dims4()?;
        if m != self.intersection.len() {
            return Err(Error::invalid(format!(
                "expected {} classes, got {m}",
                self.intersection.len()
            )));
        }
        let hw = h * w;
        for (t, (p, y)) in pred
            .data()
            .chunks_exact(hw)
            .zip(target.data().chunks_exact(hw))
            .enumerate()
            .take(n * m)
        {
            let c = t % m;
            for (&a, &b) in p.iter().zip(y) {
                let (a, b) = (binary(a)?, binary(b)?);
                self.intersection[c] += u64::from(a && b);
                self.union[c] += u64::from(a || b);
            }
        }
        Ok(())
    }

    pub fn report(&self) -> IouReport {
        let mut per_class = Vec::with_capacity(self.union.len());
        let mut empty = Vec::with_capacity(self.union.len());
        for (&i, &u) in self.intersection.iter().zip(&self.union) {
            empty.push(u == 0);
            per_class.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
        }
        let mean = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
        IouReport {
            per_class,
            empty,
            mean,
        }
    }
}

fn binary(v: f64) -> Result<bool> {
    match v {
        0.0 => Ok(false),
        1.0 => Ok(true),
        _ => Err(Error::invalid(format!("expected binary mask value, got {v}"))),
    }
}

/// IoU per class of binary `(N, m, H, W)` masks, aggregated over the batch.
pub fn miou(pred: &Tensor, target: &Tensor) -> Result<IouReport> {
    let (_, m, _, _) = target.dims4()?;
    let mut acc = IouAccumulator::new(m);
    acc.add(pred, target)?;
    Ok(acc.report())
}
