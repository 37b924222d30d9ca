use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{self, BlockSpec, Ctx, NormKind, NormPolicy, RunningUpdate};
use super::norm::{BatchMoments, BranchSet, Mode, NormConfig, RunningStats};
use super::params::{Bindings, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pseudo-probe exposing the network input itself.
pub const INPUT_PROBE: &str = "input";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub policy: NormPolicy,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub in_channels: usize,
    pub sn_branches: BranchSet,
    pub norm: NormConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            policy: NormPolicy::PlainBn,
            widths: vec![8, 16],
            num_classes: 7,
            in_channels: 3,
            sn_branches: BranchSet::all(),
            norm: NormConfig::default(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("model.widths must be non-empty".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("model.widths entries must be positive".into()));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("model.num_classes and model.in_channels must be positive".into()));
        }
        if self.norm.eps <= 0.0 || !(0.0..=1.0).contains(&self.norm.momentum) {
            return Err(Error::Config("model.norm needs eps > 0 and momentum in [0, 1]".into()));
        }
        Ok(())
    }

    /// Block layout: the stem emits `widths[0]` channels at half resolution;
    /// each block halves the resolution again whenever its width changes.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut prev = self.widths[0];
        self.widths
            .iter()
            .map(|&w| {
                let spec = BlockSpec {
                    in_ch: prev,
                    mid_ch: (w / 2).max(1),
                    out_ch: w,
                    stride: if w == prev { 1 } else { 2 },
                };
                prev = w;
                spec
            })
            .collect()
    }

    /// Post-ReLU sites in depth order: stem, three per block, decoder.
    pub fn probe_names(&self) -> Vec<String> {
        let mut names = vec!["stem.relu".to_string()];
        for i in 0..self.widths.len() {
            for r in 1..=3 {
                names.push(format!("block{}.relu{r}", i + 1));
            }
        }
        names.push("decoder.relu".to_string());
        names
    }
}

/// Small encoder–decoder segmentation network built from bottleneck blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet {
    config: NetConfig,
    store: ParamStore,
    probes: Vec<String>,
}

/// Result of one forward pass.
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: Var,
    pub captured: BTreeMap<String, Tensor>,
    pub bindings: Bindings,
    pub running_updates: Vec<RunningUpdate>,
}

impl ToyNet {
    /// Deterministic initialization from `seed`.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let w0 = config.widths[0];
        block::init_conv(&mut store, &mut rng, "stem.conv", (w0, config.in_channels, 3), false)?;
        block::init_norm(&mut store, "stem.bn", NormKind::Batch, w0)?;
        for (i, spec) in config.blocks().iter().enumerate() {
            block::init_block(&mut store, &mut rng, &format!("block{}", i + 1), spec, config.policy)?;
        }
        let last = *config.widths.last().expect("validated non-empty");
        block::init_conv(&mut store, &mut rng, "decoder.conv", (last, last, 1), false)?;
        block::init_norm(&mut store, "decoder.bn", NormKind::Batch, last)?;
        block::init_conv(
            &mut store,
            &mut rng,
            "classifier",
            (config.num_classes, last, 1),
            true,
        )?;
        let probes = config.probe_names();
        Ok(ToyNet {
            config,
            store,
            probes,
        })
    }

    /// Reassemble a network from a stored parameter set; names and shapes
    /// must match the architecture exactly.
    pub fn from_parts(config: NetConfig, store: ParamStore) -> Result<Self> {
        let template = ToyNet::build(config, 0)?;
        if template.store.len() != store.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: architecture has {}, checkpoint has {}",
                template.store.len(),
                store.len()
            )));
        }
        for e in template.store.entries() {
            let t = store
                .get(&e.name)
                .map_err(|_| Error::Format(format!("checkpoint lacks parameter `{}`", e.name)))?;
            if t.shape() != e.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.tensor.shape()
                )));
            }
        }
        Ok(ToyNet {
            probes: template.probes,
            config: template.config,
            store,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn policy(&self) -> NormPolicy {
        self.config.policy
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn probe_names(&self) -> &[String] {
        &self.probes
    }

    /// Forward pass over an NCHW batch. In train mode the returned pass
    /// carries the batch moments that [`ToyNet::apply_running_updates`]
    /// folds into the running statistics.
    pub fn forward(&self, x: &Tensor, mode: Mode, capture: &[String]) -> Result<ForwardPass> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "network input channels",
                lhs: vec![self.config.in_channels],
                rhs: x.shape().to_vec(),
            });
        }
        for name in capture {
            if name != INPUT_PROBE && !self.probes.contains(name) {
                return Err(Error::UnknownProbe(name.clone()));
            }
        }
        let mut ctx = Ctx::new(&self.store, mode, self.config.norm, self.config.sn_branches.clone());
        let mut captured = BTreeMap::new();
        let mut grab = |ctx: &Ctx<'_>, name: &str, v: Var| {
            if capture.iter().any(|c| c == name) {
                captured.insert(name.to_string(), ctx.g.value(v).clone());
            }
        };

        let input = ctx.g.constant(x.clone());
        grab(&ctx, INPUT_PROBE, input);
        let h0 = ctx.conv("stem.conv", input, 2, 1)?;
        let h0 = ctx.norm("stem.bn", NormKind::Batch, h0)?;
        let mut feat = ctx.g.relu(h0);
        grab(&ctx, "stem.relu", feat);
        for (i, spec) in self.config.blocks().iter().enumerate() {
            let prefix = format!("block{}", i + 1);
            let out = block::bottleneck_block(&mut ctx, &prefix, spec, self.config.policy, feat)?;
            grab(&ctx, &format!("{prefix}.relu1"), out.relu1);
            grab(&ctx, &format!("{prefix}.relu2"), out.relu2);
            grab(&ctx, &format!("{prefix}.relu3"), out.output);
            feat = out.output;
        }
        let d = ctx.conv("decoder.conv", feat, 1, 0)?;
        let d = ctx.norm("decoder.bn", NormKind::Batch, d)?;
        let d = ctx.g.relu(d);
        grab(&ctx, "decoder.relu", d);
        let scores = ctx.conv("classifier", d, 1, 0)?;
        let logits = ctx.g.upsample_bilinear(scores, h, w)?;

        Ok(ForwardPass {
            logits,
            captured,
            bindings: ctx.binder.finish(),
            running_updates: ctx.updates,
            graph: ctx.g,
        })
    }

    /// Detached activations at the requested probes, eval mode.
    pub fn capture(&self, x: &Tensor, probes: &[String]) -> Result<BTreeMap<String, Tensor>> {
        Ok(self.forward(x, Mode::Eval, probes)?.captured)
    }

    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate]) -> Result<()> {
        let momentum = self.config.norm.momentum;
        for u in updates {
            let mean_name = format!("{}.running_mean", u.prefix);
            let var_name = format!("{}.running_var", u.prefix);
            let mut stats = RunningStats {
                mean: self.store.get(&mean_name)?.clone(),
                var: self.store.get(&var_name)?.clone(),
            };
            stats.update(
                &BatchMoments {
                    mean: u.moments.mean.clone(),
                    var: u.moments.var.clone(),
                },
                momentum,
            );
            self.store.set(&mean_name, stats.mean)?;
            self.store.set(&var_name, stats.var)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(n: usize) -> Tensor {
        let len = n * 3 * 16 * 16;
        Tensor::new(&[n, 3, 16, 16], (0..len).map(|i| ((i * 37) % 101) as f64 / 101.0).collect())
            .unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        for policy in NormPolicy::ALL {
            let cfg = NetConfig {
                policy,
                ..NetConfig::default()
            };
            let a = ToyNet::build(cfg.clone(), 5).unwrap();
            let b = ToyNet::build(cfg.clone(), 5).unwrap();
            assert_eq!(a, b);
            let c = ToyNet::build(cfg, 6).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn probe_registry_count_and_order() {
        let net = ToyNet::build(NetConfig::default(), 1).unwrap();
        let names = net.probe_names();
        assert_eq!(names.len(), 2 + 3 * 2);
        assert_eq!(names.first().unwrap(), "stem.relu");
        assert_eq!(names.last().unwrap(), "decoder.relu");
        let mut dedup = names.to_vec();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }

    #[test]
    fn logits_match_input_resolution() {
        for policy in NormPolicy::ALL {
            let net = ToyNet::build(
                NetConfig {
                    policy,
                    ..NetConfig::default()
                },
                2,
            )
            .unwrap();
            let pass = net.forward(&input(2), Mode::Train, &[]).unwrap();
            assert_eq!(pass.graph.shape(pass.logits), &[2, 7, 16, 16]);
            assert!(pass.captured.is_empty());
            assert!(!pass.running_updates.is_empty());
        }
    }

    #[test]
    fn capture_all_probes_and_reject_unknown() {
        let net = ToyNet::build(NetConfig::default(), 3).unwrap();
        let all = net.probe_names().to_vec();
        let got = net.capture(&input(1), &all).unwrap();
        assert_eq!(got.len(), all.len());
        assert!(got.values().all(|t| t.data().iter().all(|&v| v >= 0.0)));
        let err = net.capture(&input(1), &["nope".to_string()]);
        assert!(matches!(err, Err(Error::UnknownProbe(_))));
        let inp = net.capture(&input(1), &[INPUT_PROBE.to_string()]).unwrap();
        assert_eq!(inp[INPUT_PROBE], input(1));
    }

    #[test]
    fn eval_is_repeatable_and_read_only() {
        let net = ToyNet::build(NetConfig { policy: NormPolicy::IbnS, ..NetConfig::default() }, 4).unwrap();
        let a = net.forward(&input(2), Mode::Eval, &[]).unwrap();
        let b = net.forward(&input(2), Mode::Eval, &[]).unwrap();
        assert_eq!(a.graph.value(a.logits), b.graph.value(b.logits));
        assert!(a.running_updates.is_empty());
    }

    #[test]
    fn running_updates_move_buffers() {
        let mut net = ToyNet::build(NetConfig::default(), 5).unwrap();
        let before = net.store().get("stem.bn.running_mean").unwrap().clone();
        let pass = net.forward(&input(2), Mode::Train, &[]).unwrap();
        net.apply_running_updates(&pass.running_updates).unwrap();
        assert_ne!(net.store().get("stem.bn.running_mean").unwrap(), &before);
    }

    #[test]
    fn rejects_wrong_input_channels() {
        let net = ToyNet::build(NetConfig::default(), 5).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]).unwrap();
        assert!(net.forward(&x, Mode::Eval, &[]).is_err());
        assert!(ToyNet::build(NetConfig { widths: vec![], ..NetConfig::default() }, 0).is_err());
    }
}
