//! Batch, instance, layer and switchable normalization over NCHW values.
//!
//! All variances are biased (divide by the element count). Normalizers are
//! written as compositions of tape ops so their backward rules come for free.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Per-channel running mean and variance kept by BN branches.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(RunningStats {
            mean: Tensor::zeros(&[channels])?,
            var: Tensor::ones(&[channels])?,
        })
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update(&mut self, batch: &BatchMoments, momentum: f64) {
        let blend = |r: &mut Tensor, b: &Tensor| {
            r.data_mut()
                .iter_mut()
                .zip(b.data())
                .for_each(|(r, b)| *r = (1.0 - momentum) * *r + momentum * b);
        };
        blend(&mut self.mean, &batch.mean);
        blend(&mut self.var, &batch.var);
    }
}

/// Batch statistics observed by a train-mode BN branch, shape `(C,)` each.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Per-channel affine parameters plus BN running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
    pub eps: f64,
    pub momentum: f64,
}

impl NormParams {
    pub fn new(channels: usize, cfg: NormConfig) -> Result<Self> {
        if cfg.eps <= 0.0 {
            return Err(Error::invalid("normalization eps must be positive"));
        }
        Ok(NormParams {
            gamma: Tensor::ones(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
            running: RunningStats::new(channels)?,
            eps: cfg.eps,
            momentum: cfg.momentum,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Record gamma and beta on the tape as parameters.
    pub fn bind(&self, g: &mut Graph) -> Affine {
        Affine {
            gamma: g.param(self.gamma.clone()),
            beta: g.param(self.beta.clone()),
        }
    }
}

/// Tape handles for per-channel `gamma` and `beta`, each of shape `(C,)`.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Instance,
    Layer,
    Batch,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Instance, Branch::Layer, Branch::Batch];

    /// Position of this branch in a logit triple.
    pub fn slot(self) -> usize {
        match self {
            Branch::Instance => 0,
            Branch::Layer => 1,
            Branch::Batch => 2,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Branch::Instance => "IN",
            Branch::Layer => "LN",
            Branch::Batch => "BN",
        }
    }
}

/// Non-empty subset of {IN, LN, BN} mixed by a switchable normalizer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchSet(Vec<Branch>);

impl BranchSet {
    pub fn new(branches: &[Branch]) -> Result<Self> {
        let mut v = branches.to_vec();
        v.sort();
        v.dedup();
        if v.is_empty() {
            return Err(Error::invalid("switchable branch set must be non-empty"));
        }
        Ok(BranchSet(v))
    }

    pub fn all() -> Self {
        BranchSet(Branch::ALL.to_vec())
    }

    pub fn branches(&self) -> &[Branch] {
        &self.0
    }

    pub fn contains(&self, b: Branch) -> bool {
        self.0.contains(&b)
    }
}

impl Default for BranchSet {
    fn default() -> Self {
        Self::all()
    }
}

impl fmt::Display for BranchSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<_> = self.0.iter().map(|b| b.tag()).collect();
        f.write_str(&tags.join(","))
    }
}

impl FromStr for BranchSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let branches = s
            .split(',')
            .map(|t| match t.trim() {
                "IN" => Ok(Branch::Instance),
                "LN" => Ok(Branch::Layer),
                "BN" => Ok(Branch::Batch),
                other => Err(Error::Config(format!("unknown normalization branch `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        BranchSet::new(&branches)
    }
}

impl Serialize for BranchSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BranchSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Mixture logits of a switchable normalizer: one triple for means and one
/// for variances, each ordered (IN, LN, BN).
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchableWeights {
    pub mean_logits: Tensor,
    pub var_logits: Tensor,
    pub branches: BranchSet,
}

impl SwitchableWeights {
    pub fn uniform(branches: BranchSet) -> Result<Self> {
        Ok(SwitchableWeights {
            mean_logits: Tensor::zeros(&[3])?,
            var_logits: Tensor::zeros(&[3])?,
            branches,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> SwitchableVars {
        SwitchableVars {
            mean_logits: g.param(self.mean_logits.clone()),
            var_logits: g.param(self.var_logits.clone()),
            branches: self.branches.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SwitchableVars {
    pub mean_logits: Var,
    pub var_logits: Var,
    pub branches: BranchSet,
}

/// Biased mean and variance of `x` over `axes`, both kept at full rank.
fn moments(g: &mut Graph, x: Var, axes: &[usize]) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    let mean = g.mean(x, axes, true)?;
    let mean_full = g.expand(mean, &shape)?;
    let centered = g.sub(x, mean_full)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean(sq, axes, true)?;
    Ok((mean, var))
}

fn standardize(g: &mut Graph, x: Var, mean: Var, var: Var, eps: f64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let mean_full = g.expand(mean, &shape)?;
    let centered = g.sub(x, mean_full)?;
    let shifted = g.add_scalar(var, eps);
    let std = g.sqrt(shifted);
    let std_full = g.expand(std, &shape)?;
    g.div(centered, std_full)
}

fn apply_affine(g: &mut Graph, xhat: Var, affine: &Affine) -> Result<Var> {
    let shape = g.shape(xhat).to_vec();
    let c = shape[1];
    for v in [affine.gamma, affine.beta] {
        if g.shape(v) != [c] {
            return Err(Error::ShapeMismatch {
                op: "norm affine",
                lhs: shape.clone(),
                rhs: g.shape(v).to_vec(),
            });
        }
    }
    let gamma = g.reshape(affine.gamma, &[1, c, 1, 1])?;
    let gamma = g.expand(gamma, &shape)?;
    let beta = g.reshape(affine.beta, &[1, c, 1, 1])?;
    let beta = g.expand(beta, &shape)?;
    let scaled = g.mul(xhat, gamma)?;
    g.add(scaled, beta)
}

fn check_running(running: &RunningStats, c: usize) -> Result<()> {
    if running.mean.shape() != [c] || running.var.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "running stats",
            lhs: vec![c],
            rhs: running.mean.shape().to_vec(),
        });
    }
    Ok(())
}

fn bn_statistics(
    g: &mut Graph,
    x: Var,
    running: &RunningStats,
    mode: Mode,
) -> Result<(Var, Var, Option<BatchMoments>)> {
    let (n, c, h, w) = g.value(x).dims4()?;
    check_running(running, c)?;
    match mode {
        Mode::Train => {
            if n * h * w < 2 {
                return Err(Error::invalid(
                    "batch norm in train mode needs more than one value per channel",
                ));
            }
            let (mean, var) = moments(g, x, &[0, 2, 3])?;
            let batch = BatchMoments {
                mean: g.value(mean).reshape(&[c])?,
                var: g.value(var).reshape(&[c])?,
            };
            Ok((mean, var, Some(batch)))
        }
        Mode::Eval => {
            let mean = g.constant(running.mean.reshape(&[1, c, 1, 1])?);
            let var = g.constant(running.var.reshape(&[1, c, 1, 1])?);
            Ok((mean, var, None))
        }
    }
}

/// Batch normalization over `(N, H, W)` per channel. In train mode the
/// batch moments are returned so the caller can fold them into the
/// running statistics.
pub fn batch_norm(
    g: &mut Graph,
    x: Var,
    affine: &Affine,
    running: &RunningStats,
    eps: f64,
    mode: Mode,
) -> Result<(Var, Option<BatchMoments>)> {
    let (mean, var, batch) = bn_statistics(g, x, running, mode)?;
    let xhat = standardize(g, x, mean, var, eps)?;
    Ok((apply_affine(g, xhat, affine)?, batch))
}

/// Instance normalization: each `(n, c)` plane standardized over `(H, W)`.
pub fn instance_norm(g: &mut Graph, x: Var, affine: &Affine, eps: f64) -> Result<Var> {
    let (_, _, h, w) = g.value(x).dims4()?;
    if h * w < 2 {
        return Err(Error::invalid("instance norm needs at least two pixels per plane"));
    }
    let (mean, var) = moments(g, x, &[2, 3])?;
    let xhat = standardize(g, x, mean, var, eps)?;
    apply_affine(g, xhat, affine)
}

/// Layer normalization: each sample standardized over `(C, H, W)`, followed
/// by a per-channel affine.
pub fn layer_norm(g: &mut Graph, x: Var, affine: &Affine, eps: f64) -> Result<Var> {
    let (_, c, h, w) = g.value(x).dims4()?;
    if c * h * w < 2 {
        return Err(Error::invalid("layer norm needs at least two values per sample"));
    }
    let (mean, var) = moments(g, x, &[1, 2, 3])?;
    let xhat = standardize(g, x, mean, var, eps)?;
    apply_affine(g, xhat, affine)
}

/// Softmax over the entries of a rank-1 value.
pub fn softmax(g: &mut Graph, logits: Var) -> Result<Var> {
    let max = g
        .value(logits)
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = g.add_scalar(logits, -max);
    let e = g.exp(shifted);
    let total = g.sum_all(e)?;
    g.div(e, total)
}

/// Mixed statistics of a switchable normalizer, each of shape `(N, C, 1, 1)`.
#[derive(Debug)]
pub struct SwitchableMoments {
    pub mean: Var,
    pub var: Var,
    pub batch: Option<BatchMoments>,
}

pub fn switchable_moments(
    g: &mut Graph,
    x: Var,
    weights: &SwitchableVars,
    running: &RunningStats,
    mode: Mode,
) -> Result<SwitchableMoments> {
    let (n, c, h, w) = g.value(x).dims4()?;
    let target = [n, c, 1, 1];
    let slots: Vec<usize> = weights.branches.branches().iter().map(|b| b.slot()).collect();
    let mean_logits = g.gather(weights.mean_logits, &slots)?;
    let var_logits = g.gather(weights.var_logits, &slots)?;
    let mean_w = softmax(g, mean_logits)?;
    let var_w = softmax(g, var_logits)?;

    let mut mixed_mean: Option<Var> = None;
    let mut mixed_var: Option<Var> = None;
    let mut batch = None;
    for (k, branch) in weights.branches.branches().iter().enumerate() {
        let (mean, var) = match branch {
            Branch::Instance => {
                if h * w < 2 {
                    return Err(Error::invalid("switchable IN branch needs H·W ≥ 2"));
                }
                moments(g, x, &[2, 3])?
            }
            Branch::Layer => moments(g, x, &[1, 2, 3])?,
            Branch::Batch => {
                let (m, v, b) = bn_statistics(g, x, running, mode)?;
                batch = b;
                (m, v)
            }
        };
        let mean = g.expand(mean, &target)?;
        let var = g.expand(var, &target)?;
        let wm = g.gather(mean_w, &[k])?;
        let wv = g.gather(var_w, &[k])?;
        let tm = g.mul(wm, mean)?;
        let tv = g.mul(wv, var)?;
        mixed_mean = Some(match mixed_mean {
            Some(acc) => g.add(acc, tm)?,
            None => tm,
        });
        mixed_var = Some(match mixed_var {
            Some(acc) => g.add(acc, tv)?,
            None => tv,
        });
    }
    Ok(SwitchableMoments {
        mean: mixed_mean.expect("non-empty branch set"),
        var: mixed_var.expect("non-empty branch set"),
        batch,
    })
}

/// Switchable normalization: standardize with softmax-weighted mixtures of
/// the IN, LN and BN means and variances, then apply the affine.
pub fn switchable_norm(
    g: &mut Graph,
    x: Var,
    affine: &Affine,
    weights: &SwitchableVars,
    running: &RunningStats,
    eps: f64,
    mode: Mode,
) -> Result<(Var, Option<BatchMoments>)> {
    let m = switchable_moments(g, x, weights, running, mode)?;
    let xhat = standardize(g, x, m.mean, m.var, eps)?;
    Ok((apply_affine(g, xhat, affine)?, m.batch))
}
