//! Lovász hinge: a convex surrogate of the Jaccard loss for binary tasks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the per-position weights of the sorted margins are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaRule {
    /// Jaccard-loss increments over the sorted labels (the Lovász extension).
    #[default]
    SortedLabels,
    /// The same expression evaluated on the sorted margins instead of the
    /// labels. Kept for comparison only; it is not a Lovász extension.
    SortedMargins,
}

/// First differences of `1 − (Σ_{j>i} ŷ_j) / (Σ_j ŷ_j + Σ_{j≤i} (1 − ŷ_j))`
/// for labels already sorted by decreasing margin.
pub fn jaccard_increments(sorted_labels: &[f64]) -> Vec<f64> {
    let total: f64 = sorted_labels.iter().sum();
    let mut out = Vec::with_capacity(sorted_labels.len());
    let mut cum_pos = 0.0;
    let mut cum_neg = 0.0;
    let mut prev = 0.0;
    for &y in sorted_labels {
        cum_pos += y;
        cum_neg += 1.0 - y;
        let delta = 1.0 - (total - cum_pos) / (total + cum_neg);
        out.push(delta - prev);
        prev = delta;
    }
    out
}

/// Per-task Lovász hinge on one flattened task. `logits` is rank-1 and
/// `labels` holds the matching 0/1 targets. Tasks without a positive label
/// contribute 0.
pub fn lovasz_hinge_flat(g: &mut Graph, logits: Var, labels: &[f64], rule: DeltaRule) -> Result<Var> {
    if g.shape(logits) != [labels.len()] {
        return Err(Error::ShapeMismatch {
            op: "lovasz_hinge_flat",
            lhs: g.shape(logits).to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if labels.iter().all(|&y| y <= 0.0) {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    // sign(y) with sign(0) = −1, so m = 1 − sign(y)·s.
    let signs = labels.iter().map(|&y| if y > 0.0 { 1.0 } else { -1.0 }).collect();
    let signs = g.constant(Tensor::vector(signs)?);
    let signed = g.mul(logits, signs)?;
    let margins = g.affine(signed, -1.0, 1.0);
    let (sorted, perm) = g.sort_desc_detached(margins)?;
    let weights = match rule {
        DeltaRule::SortedLabels => {
            let sorted_labels: Vec<f64> = perm.iter().map(|&i| labels[i]).collect();
            jaccard_increments(&sorted_labels)
        }
        DeltaRule::SortedMargins => jaccard_increments(g.value(sorted).data()),
    };
    let weights = g.constant(Tensor::vector(weights)?);
    let hinge = g.relu(sorted);
    let weighted = g.mul(hinge, weights)?;
    g.sum_all(weighted)
}

/// Lovász extension of the Jaccard set function evaluated directly from set
/// cardinalities, for short vectors. Used to cross-check the hinge.
///
/// `Δ_J(M) = 1 − |P ∖ M| / |P ∪ M|` with `P = {i : y_i = 1}`; when `P` is
/// empty the set function is taken to be identically 0.
pub fn lovasz_extension_oracle(margins: &[f64], labels: &[u8]) -> Result<f64> {
    const MAX_LEN: usize = 12;
    if margins.len() > MAX_LEN {
        return Err(Error::invalid(format!(
            "oracle supports at most {MAX_LEN} entries, got {}",
            margins.len()
        )));
    }
    if margins.len() != labels.len() {
        return Err(Error::invalid("oracle margins and labels differ in length"));
    }
    let positives: u32 = labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y != 0)
        .fold(0, |acc, (i, _)| acc | (1 << i));
    let jaccard = |set: u32| -> f64 {
        if positives == 0 || set == 0 {
            return 0.0;
        }
        let missed = (positives & !set).count_ones() as f64;
        let union = (positives | set).count_ones() as f64;
        1.0 - missed / union
    };
    let clipped: Vec<f64> = margins.iter().map(|&m| m.max(0.0)).collect();
    let mut order: Vec<usize> = (0..margins.len()).collect();
    order.sort_by(|&a, &b| clipped[b].total_cmp(&clipped[a]));
    let mut set = 0u32;
    let mut total = 0.0;
    for &i in &order {
        let before = jaccard(set);
        set |= 1 << i;
        total += clipped[i] * (jaccard(set) - before);
    }
    Ok(total)
}
