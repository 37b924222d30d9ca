//! Per-channel Gaussian statistics of activations and the symmetric-KL
//! feature divergence between two input modalities.

mod report;

pub use report::{DivergenceReport, DivergenceRow, ReportMeta};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{ToyNet, INPUT_PROBE};
use crate::tensor::Tensor;

/// Variance floor guarding dead (constant) channels.
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Streaming mean and biased variance (Welford), with Chan's merge.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ChannelStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl ChannelStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &ChannelStats) -> ChannelStats {
        if other.count == 0 {
            return *self;
        }
        if self.count == 0 {
            return *other;
        }
        let count = self.count + other.count;
        let (na, nb, n) = (self.count as f64, other.count as f64, count as f64);
        let delta = other.mean - self.mean;
        ChannelStats {
            count,
            mean: self.mean + delta * nb / n,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Biased variance, `m2 / count`; 0 when empty.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    pub fn gaussian(&self) -> Gaussian {
        Gaussian {
            mean: self.mean,
            var: self.variance(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian {
    pub fn new(mean: f64, var: f64) -> Self {
        Gaussian { mean, var }
    }

    fn floored(self, floor: f64) -> Self {
        Gaussian {
            mean: self.mean,
            var: self.var.max(floor),
        }
    }
}

/// `KL(a‖b) = log(σ_b/σ_a) + (σ_a² + (μ_a − μ_b)²) / (2σ_b²) − 1/2`, with
/// both variances floored first.
pub fn kl_gaussian(a: Gaussian, b: Gaussian, floor: f64) -> f64 {
    let (a, b) = (a.floored(floor), b.floored(floor));
    let d = a.mean - b.mean;
    0.5 * (b.var / a.var).ln() + (a.var + d * d) / (2.0 * b.var) - 0.5
}

/// `KL(a‖b) + KL(b‖a)`.
pub fn sym_kl(a: Gaussian, b: Gaussian, floor: f64) -> f64 {
    kl_gaussian(a, b, floor) + kl_gaussian(b, a, floor)
}

/// Per-channel statistics of one probe.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    probe: String,
    channels: Vec<ChannelStats>,
}

impl LayerStats {
    pub fn new(probe: impl Into<String>, channels: usize) -> Self {
        LayerStats {
            probe: probe.into(),
            channels: vec![ChannelStats::default(); channels],
        }
    }

    pub fn probe(&self) -> &str {
        &self.probe
    }

    pub fn channels(&self) -> &[ChannelStats] {
        &self.channels
    }

    pub fn count(&self) -> u64 {
        self.channels.first().map_or(0, ChannelStats::count)
    }

    /// Add every `(n, h, w)` value of each channel of an NCHW activation.
    pub fn accumulate(&mut self, activation: &Tensor) -> Result<()> {
        let (n, c, h, w) = activation.dims4()?;
        if c != self.channels.len() {
            return Err(Error::invalid(format!(
                "probe `{}` has {} channels, activation has {c}",
                self.probe,
                self.channels.len()
            )));
        }
        let hw = h * w;
        let data = activation.data();
        for i in 0..n {
            for (ch, stats) in self.channels.iter_mut().enumerate() {
                let start = (i * c + ch) * hw;
                for &x in &data[start..start + hw] {
                    stats.push(x);
                }
            }
        }
        Ok(())
    }

    pub fn merge(&self, other: &LayerStats) -> Result<LayerStats> {
        check_channels(self, other)?;
        Ok(LayerStats {
            probe: self.probe.clone(),
            channels: self
                .channels
                .iter()
                .zip(&other.channels)
                .map(|(a, b)| a.merge(b))
                .collect(),
        })
    }
}

fn check_channels(a: &LayerStats, b: &LayerStats) -> Result<()> {
    if a.channels.len() != b.channels.len() {
        return Err(Error::invalid(format!(
            "channel count mismatch at `{}`: {} vs {}",
            a.probe,
            a.channels.len(),
            b.channels.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerDivergence {
    pub value: f64,
    /// Channels where either side's variance was raised to the floor.
    pub floored_channels: usize,
}

/// Mean over channels of the symmetric KL between per-channel Gaussians.
pub fn layer_divergence(a: &LayerStats, b: &LayerStats, floor: f64) -> Result<LayerDivergence> {
    check_channels(a, b)?;
    if a.channels.is_empty() {
        return Err(Error::invalid(format!("probe `{}` has no channels", a.probe)));
    }
    let mut total = 0.0;
    let mut floored_channels = 0;
    for (ca, cb) in a.channels.iter().zip(&b.channels) {
        let (ga, gb) = (ca.gaussian(), cb.gaussian());
        if ga.var < floor || gb.var < floor {
            floored_channels += 1;
        }
        total += sym_kl(ga, gb, floor);
    }
    Ok(LayerDivergence {
        value: total / a.channels.len() as f64,
        floored_channels,
    })
}

/// Anything that exposes named activations for an input batch.
pub trait FeatureSource {
    /// Probe names in depth order.
    fn probe_names(&self) -> Vec<String>;
    fn capture(&self, x: &Tensor, probes: &[String]) -> Result<BTreeMap<String, Tensor>>;
}

impl FeatureSource for ToyNet {
    /// The raw input first, then the network's post-ReLU probes.
    fn probe_names(&self) -> Vec<String> {
        std::iter::once(INPUT_PROBE.to_string())
            .chain(ToyNet::probe_names(self).iter().cloned())
            .collect()
    }

    fn capture(&self, x: &Tensor, probes: &[String]) -> Result<BTreeMap<String, Tensor>> {
        ToyNet::capture(self, x, probes)
    }
}

/// Accumulate per-probe statistics over a stream of NCHW batches.
pub fn collect_stats<S, I>(source: &S, batches: I, probes: &[String]) -> Result<(Vec<LayerStats>, usize)>
where
    S: FeatureSource + ?Sized,
    I: IntoIterator<Item = Tensor>,
{
    let mut stats: Vec<Option<LayerStats>> = vec![None; probes.len()];
    let mut samples = 0;
    for batch in batches {
        samples += batch.dims4()?.0;
        let captured = source.capture(&batch, probes)?;
        for (slot, name) in stats.iter_mut().zip(probes) {
            let act = captured
                .get(name)
                .ok_or_else(|| Error::UnknownProbe(name.clone()))?;
            let layer = slot.get_or_insert_with(|| LayerStats::new(name.clone(), act.shape()[1]));
            layer.accumulate(act)?;
        }
    }
    if samples == 0 {
        return Err(Error::invalid("empty sample stream"));
    }
    Ok((stats.into_iter().map(|s| s.expect("filled by first batch")).collect(), samples))
}

/// Divergence between two modalities at each requested probe, ordered by
/// the source's depth order.
pub fn divergence_profile<S, A, B>(
    source: &S,
    stream_a: A,
    stream_b: B,
    probes: &[String],
    floor: f64,
) -> Result<DivergenceReport>
where
    S: FeatureSource + ?Sized,
    A: IntoIterator<Item = Tensor>,
    B: IntoIterator<Item = Tensor>,
{
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::invalid(format!("variance floor must be positive, got {floor}")));
    }
    let order = source.probe_names();
    let mut ranked = Vec::with_capacity(probes.len());
    for p in probes {
        let depth = order
            .iter()
            .position(|o| o == p)
            .ok_or_else(|| Error::UnknownProbe(p.clone()))?;
        if ranked.iter().any(|(_, q): &(usize, String)| q == p) {
            return Err(Error::invalid(format!("probe `{p}` requested twice")));
        }
        ranked.push((depth, p.clone()));
    }
    if ranked.is_empty() {
        return Err(Error::invalid("no probes requested"));
    }
    ranked.sort();
    let names: Vec<String> = ranked.iter().map(|(_, p)| p.clone()).collect();

    let (stats_a, samples_a) = collect_stats(source, stream_a, &names)?;
    let (stats_b, samples_b) = collect_stats(source, stream_b, &names)?;
    let mut rows = Vec::with_capacity(names.len());
    for (((depth, probe), a), b) in ranked.into_iter().zip(&stats_a).zip(&stats_b) {
        let d = layer_divergence(a, b, floor)?;
        rows.push(DivergenceRow {
            probe,
            depth,
            divergence: d.value,
            floored_channels: d.floored_channels,
        });
    }
    Ok(DivergenceReport {
        meta: ReportMeta {
            model: String::new(),
            modality_a: "A".into(),
            modality_b: "B".into(),
            samples_a,
            samples_b,
            floor,
        },
        rows,
    })
}
