//! Residual bottleneck blocks with the four normalization wirings.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::norm::{
    self, Affine, BatchMoments, BranchSet, Mode, NormConfig, RunningStats, SwitchableVars,
};
use super::params::{Binder, ParamKind, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the first normalization of each bottleneck block is wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NormPolicy {
    #[serde(rename = "PLAIN_BN")]
    PlainBn,
    /// Half the channels instance-normalized, half batch-normalized.
    #[serde(rename = "IBN_A")]
    IbnA,
    /// Plain BN in the residual path, IN after the residual addition.
    #[serde(rename = "IBN_B")]
    IbnB,
    /// Switchable normalization in place of the IN/BN split.
    #[serde(rename = "IBN_S")]
    IbnS,
}

impl NormPolicy {
    pub const ALL: [NormPolicy; 4] = [
        NormPolicy::PlainBn,
        NormPolicy::IbnA,
        NormPolicy::IbnB,
        NormPolicy::IbnS,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NormPolicy::PlainBn => "PLAIN_BN",
            NormPolicy::IbnA => "IBN_A",
            NormPolicy::IbnB => "IBN_B",
            NormPolicy::IbnS => "IBN_S",
        }
    }

    fn first_norm(self) -> NormKind {
        match self {
            NormPolicy::PlainBn | NormPolicy::IbnB => NormKind::Batch,
            NormPolicy::IbnA => NormKind::IbnSplit,
            NormPolicy::IbnS => NormKind::Switchable,
        }
    }
}

impl fmt::Display for NormPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormPolicy::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown norm policy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Instance,
    Switchable,
    /// First `ceil(C/2)` channels IN, the rest BN.
    IbnSplit,
}

/// Number of instance-normalized channels in an IBN-a split of `c` channels.
pub fn ibn_split(c: usize) -> usize {
    c.div_ceil(2)
}

/// Batch statistics to fold into the running buffers under `prefix`.
#[derive(Clone, Debug)]
pub struct RunningUpdate {
    pub prefix: String,
    pub moments: BatchMoments,
}

/// He-normal convolution kernel (std = sqrt(2 / fan_in)) and optional zero bias.
pub fn init_conv<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    (cout, cin, k): (usize, usize, usize),
    bias: bool,
) -> Result<()> {
    let fan_in = (cin * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let n = cout * cin * k * k;
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect::<Vec<f64>>();
    store.insert(
        format!("{name}.weight"),
        ParamKind::Weight,
        Tensor::new(&[cout, cin, k, k], data)?,
    )?;
    if bias {
        store.insert(format!("{name}.bias"), ParamKind::Weight, Tensor::zeros(&[cout])?)?;
    }
    Ok(())
}

fn init_affine(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), ParamKind::NormAffine, Tensor::ones(&[c])?)?;
    store.insert(format!("{prefix}.beta"), ParamKind::NormAffine, Tensor::zeros(&[c])?)
}

fn init_running(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    let r = RunningStats::new(c)?;
    store.insert(format!("{prefix}.running_mean"), ParamKind::Buffer, r.mean)?;
    store.insert(format!("{prefix}.running_var"), ParamKind::Buffer, r.var)
}

/// gamma=1, beta=0, running mean 0 / var 1, switchable logits 0.
pub fn init_norm(store: &mut ParamStore, prefix: &str, kind: NormKind, c: usize) -> Result<()> {
    match kind {
        NormKind::Batch => {
            init_affine(store, prefix, c)?;
            init_running(store, prefix, c)
        }
        NormKind::Instance => init_affine(store, prefix, c),
        NormKind::Switchable => {
            init_affine(store, prefix, c)?;
            init_running(store, prefix, c)?;
            store.insert(format!("{prefix}.mean_logits"), ParamKind::Switch, Tensor::zeros(&[3])?)?;
            store.insert(format!("{prefix}.var_logits"), ParamKind::Switch, Tensor::zeros(&[3])?)
        }
        NormKind::IbnSplit => {
            let n_in = ibn_split(c);
            init_norm(store, &format!("{prefix}.in"), NormKind::Instance, n_in)?;
            if c > n_in {
                init_norm(store, &format!("{prefix}.bn"), NormKind::Batch, c - n_in)?;
            }
            Ok(())
        }
    }
}

/// Everything a forward pass threads through the layers.
pub struct Ctx<'s> {
    pub g: Graph,
    pub binder: Binder<'s>,
    pub mode: Mode,
    pub norm: NormConfig,
    pub branches: BranchSet,
    pub updates: Vec<RunningUpdate>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, norm: NormConfig, branches: BranchSet) -> Self {
        Ctx {
            g: Graph::new(),
            binder: Binder::new(store),
            mode,
            norm,
            branches,
            updates: Vec::new(),
        }
    }

    fn affine(&mut self, prefix: &str) -> Result<Affine> {
        Ok(Affine {
            gamma: self.binder.var(&mut self.g, &format!("{prefix}.gamma"))?,
            beta: self.binder.var(&mut self.g, &format!("{prefix}.beta"))?,
        })
    }

    fn running(&self, prefix: &str) -> Result<RunningStats> {
        Ok(RunningStats {
            mean: self.binder.tensor(&format!("{prefix}.running_mean"))?.clone(),
            var: self.binder.tensor(&format!("{prefix}.running_var"))?.clone(),
        })
    }

    fn record(&mut self, prefix: &str, moments: Option<BatchMoments>) {
        if let Some(moments) = moments {
            self.updates.push(RunningUpdate {
                prefix: prefix.to_string(),
                moments,
            });
        }
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = self.binder.var(&mut self.g, &format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let b = if self.binder.tensor(&bias_name).is_ok() {
            Some(self.binder.var(&mut self.g, &bias_name)?)
        } else {
            None
        };
        self.g.conv2d(x, w, b, stride, padding)
    }

    pub fn norm(&mut self, prefix: &str, kind: NormKind, x: Var) -> Result<Var> {
        let eps = self.norm.eps;
        match kind {
            NormKind::Batch => {
                let aff = self.affine(prefix)?;
                let running = self.running(prefix)?;
                let (y, m) = norm::batch_norm(&mut self.g, x, &aff, &running, eps, self.mode)?;
                self.record(prefix, m);
                Ok(y)
            }
            NormKind::Instance => {
                let aff = self.affine(prefix)?;
                norm::instance_norm(&mut self.g, x, &aff, eps)
            }
            NormKind::Switchable => {
                let aff = self.affine(prefix)?;
                let running = self.running(prefix)?;
                let sw = SwitchableVars {
                    mean_logits: self.binder.var(&mut self.g, &format!("{prefix}.mean_logits"))?,
                    var_logits: self.binder.var(&mut self.g, &format!("{prefix}.var_logits"))?,
                    branches: self.branches.clone(),
                };
                let (y, m) =
                    norm::switchable_norm(&mut self.g, x, &aff, &sw, &running, eps, self.mode)?;
                self.record(prefix, m);
                Ok(y)
            }
            NormKind::IbnSplit => {
                let c = self.g.shape(x)[1];
                let n_in = ibn_split(c);
                let head = self.g.narrow(x, 1, 0, n_in)?;
                let head = self.norm(&format!("{prefix}.in"), NormKind::Instance, head)?;
                if n_in == c {
                    return Ok(head);
                }
                let tail = self.g.narrow(x, 1, n_in, c - n_in)?;
                let tail = self.norm(&format!("{prefix}.bn"), NormKind::Batch, tail)?;
                self.g.concat(&[head, tail], 1)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_ch: usize,
    pub mid_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn has_projection(&self) -> bool {
        self.in_ch != self.out_ch || self.stride != 1
    }
}

pub fn init_block<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    spec: &BlockSpec,
    policy: NormPolicy,
) -> Result<()> {
    let BlockSpec {
        in_ch,
        mid_ch,
        out_ch,
        ..
    } = *spec;
    init_conv(store, rng, &format!("{prefix}.conv1"), (mid_ch, in_ch, 1), false)?;
    init_norm(store, &format!("{prefix}.norm1"), policy.first_norm(), mid_ch)?;
    init_conv(store, rng, &format!("{prefix}.conv2"), (mid_ch, mid_ch, 3), false)?;
    init_norm(store, &format!("{prefix}.bn2"), NormKind::Batch, mid_ch)?;
    init_conv(store, rng, &format!("{prefix}.conv3"), (out_ch, mid_ch, 1), false)?;
    init_norm(store, &format!("{prefix}.bn3"), NormKind::Batch, out_ch)?;
    if spec.has_projection() {
        init_conv(store, rng, &format!("{prefix}.proj"), (out_ch, in_ch, 1), false)?;
        init_norm(store, &format!("{prefix}.proj_bn"), NormKind::Batch, out_ch)?;
    }
    if policy == NormPolicy::IbnB {
        init_norm(store, &format!("{prefix}.out_in"), NormKind::Instance, out_ch)?;
    }
    Ok(())
}

/// Intermediate values of one bottleneck block.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    /// After norm1 and the first ReLU.
    pub relu1: Var,
    /// After the 3×3 convolution, BN and ReLU.
    pub relu2: Var,
    /// Residual plus identity, before any post-addition normalization.
    pub sum: Var,
    /// Block output after the final ReLU.
    pub output: Var,
}

/// conv1×1 → norm1 → ReLU → conv3×3 → BN → ReLU → conv1×1 → BN → (+identity)
/// → [IN for IBN-b] → ReLU.
pub fn bottleneck_block(
    ctx: &mut Ctx<'_>,
    prefix: &str,
    spec: &BlockSpec,
    policy: NormPolicy,
    x: Var,
) -> Result<BlockOutput> {
    let c = ctx.g.shape(x).get(1).copied().unwrap_or(0);
    if c != spec.in_ch {
        return Err(Error::ShapeMismatch {
            op: "bottleneck input channels",
            lhs: vec![spec.in_ch],
            rhs: ctx.g.shape(x).to_vec(),
        });
    }
    let h = ctx.conv(&format!("{prefix}.conv1"), x, 1, 0)?;
    let h = ctx.norm(&format!("{prefix}.norm1"), policy.first_norm(), h)?;
    let relu1 = ctx.g.relu(h);
    let h = ctx.conv(&format!("{prefix}.conv2"), relu1, spec.stride, 1)?;
    let h = ctx.norm(&format!("{prefix}.bn2"), NormKind::Batch, h)?;
    let relu2 = ctx.g.relu(h);
    let h = ctx.conv(&format!("{prefix}.conv3"), relu2, 1, 0)?;
    let residual = ctx.norm(&format!("{prefix}.bn3"), NormKind::Batch, h)?;
    let identity = if spec.has_projection() {
        let p = ctx.conv(&format!("{prefix}.proj"), x, spec.stride, 0)?;
        ctx.norm(&format!("{prefix}.proj_bn"), NormKind::Batch, p)?
    } else {
        x
    };
    let sum = ctx.g.add(residual, identity)?;
    let pre = if policy == NormPolicy::IbnB {
        ctx.norm(&format!("{prefix}.out_in"), NormKind::Instance, sum)?
    } else {
        sum
    };
    let output = ctx.g.relu(pre);
    Ok(BlockOutput {
        relu1,
        relu2,
        sum,
        output,
    })
}
