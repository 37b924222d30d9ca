//! Deterministic paired two-modality segmentation scenes.
//!
//! Every sample is a pure function of `(spec, seed, id)`: a ChaCha8 stream
//! is seeded from `seed` (through `rand_core`'s documented PCG32 expansion)
//! and the ChaCha stream id is set to the sample id. The geometry is drawn
//! first; both modalities are rendered from the same mask.

mod export;
mod raster;

pub use export::{export_dataset, import_dataset, SampleSet};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use raster::Canvas;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Band,
    Blob,
}

/// Appearance model separating modality B from modality A.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppearanceShift {
    /// Applied to the clean A image before the luminance projection.
    pub mixing: [[f64; 3]; 3],
    pub invert: bool,
    /// Per-image gain and offset of the B channel, drawn uniformly.
    pub gain_range: [f64; 2],
    pub offset_range: [f64; 2],
    /// Standard deviation of the independent per-pixel noise of each modality.
    pub noise: f64,
}

impl Default for AppearanceShift {
    fn default() -> Self {
        AppearanceShift {
            mixing: [[0.1, 0.8, 0.1], [0.6, 0.3, 0.1], [0.1, 0.1, 0.8]],
            invert: true,
            gain_range: [0.5, 1.1],
            offset_range: [-0.1, 0.3],
            noise: 0.03,
        }
    }
}

impl AppearanceShift {
    /// No shift at all: B is the luminance of A.
    pub fn identity() -> Self {
        AppearanceShift {
            mixing: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            invert: false,
            gain_range: [1.0, 1.0],
            offset_range: [0.0, 0.0],
            noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Expected pixel fraction of each foreground class. Mask channel 0 is
    /// the background (pixels with no foreground class); channel `k + 1`
    /// holds `frequencies[k]`.
    pub frequencies: Vec<f64>,
    pub shapes: Vec<ShapeKind>,
    pub appearance: AppearanceShift,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            frequencies: vec![0.12, 0.08, 0.005, 0.10, 0.06, 0.18],
            shapes: vec![ShapeKind::Ellipse, ShapeKind::Band, ShapeKind::Blob],
            appearance: AppearanceShift::default(),
        }
    }
}

/// Rec. 601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

const BACKGROUND_COLOR: [f64; 3] = [0.45, 0.55, 0.30];
const CLASS_COLORS: [[f64; 3]; 8] = [
    [0.15, 0.15, 0.20],
    [0.20, 0.80, 0.25],
    [0.75, 0.60, 0.35],
    [0.20, 0.35, 0.80],
    [0.30, 0.65, 0.75],
    [0.85, 0.85, 0.30],
    [0.70, 0.30, 0.60],
    [0.90, 0.45, 0.15],
];
/// Fraction of a class colour blended into the pixel.
const CLASS_OPACITY: f64 = 0.75;
const TEXTURE_AMPLITUDE: f64 = 0.06;

impl SceneSpec {
    /// Number of mask channels, background included.
    pub fn classes(&self) -> usize {
        self.frequencies.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "image size must be at least 4x4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.frequencies.is_empty() {
            return Err(Error::Config("at least one foreground class is required".into()));
        }
        if let Some(f) = self.frequencies.iter().find(|f| !(f.is_finite() && **f >= 0.0)) {
            return Err(Error::Config(format!("class frequencies must be non-negative, got {f}")));
        }
        let total: f64 = self.frequencies.iter().sum();
        if total > 1.0 {
            return Err(Error::Config(format!(
                "class frequencies sum to {total}, which exceeds 1"
            )));
        }
        if !self.frequencies.iter().any(|&f| f < 0.01) {
            return Err(Error::Config("at least one class must be rare (frequency below 0.01)".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("shape vocabulary is empty".into()));
        }
        let a = &self.appearance;
        for (name, r) in [("gain_range", a.gain_range), ("offset_range", a.offset_range)] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::Config(format!("{name} must be an ordered pair, got {r:?}")));
            }
        }
        if !(a.noise.is_finite() && a.noise >= 0.0) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", a.noise)));
        }
        if a.mixing.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("mixing matrix must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::A => Modality::B,
            Modality::B => Modality::A,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::A => "A",
            Modality::B => "B",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Modality::A),
            "B" | "b" => Ok(Modality::B),
            _ => Err(Error::invalid(format!("unknown modality `{s}` (expected A or B)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: u64,
    pub seed: u64,
    /// `(3, H, W)`.
    pub image_a: Tensor,
    /// `(1, H, W)`.
    pub image_b: Tensor,
    /// `(m, H, W)` binary; channels may overlap.
    pub mask: Tensor,
}

impl SegSample {
    /// Three-channel network input; modality B is replicated per channel.
    pub fn input(&self, modality: Modality) -> Tensor {
        match modality {
            Modality::A => self.image_a.clone(),
            Modality::B => {
                let (h, w) = (self.image_b.shape()[1], self.image_b.shape()[2]);
                let d = self.image_b.data();
                let data = [d, d, d].concat();
                Tensor::new(&[3, h, w], data).expect("shape follows from image_b")
            }
        }
    }
}

/// Stack samples into an `(N, 3, H, W)` input batch and `(N, m, H, W)` targets.
pub fn make_batch(samples: &[SegSample], modality: Modality) -> Result<(Tensor, Tensor)> {
    let inputs: Vec<Tensor> = samples.iter().map(|s| s.input(modality)).collect();
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&inputs)?, Tensor::stack(&masks)?))
}

/// Random access to an ordered collection of samples.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> Result<SegSample>;
    fn classes(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input batches of at most `batch` samples, in order.
    fn input_batches(&self, modality: Modality, batch: usize) -> Result<Vec<Tensor>> {
        let batch = batch.max(1);
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.len() {
            let end = (start + batch).min(self.len());
            let samples = (start..end).map(|i| self.sample(i)).collect::<Result<Vec<_>>>()?;
            out.push(make_batch(&samples, modality)?.0);
            start = end;
        }
        Ok(out)
    }
}

/// `n` synthetic samples generated on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    spec: SceneSpec,
    seed: u64,
    len: usize,
}

pub fn gen_dataset(spec: &SceneSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        len: n,
    })
}

impl Dataset {
    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SegSample>> + '_ {
        (0..self.len).map(|i| self.sample(i))
    }
}

impl SampleSource for Dataset {
    fn len(&self) -> usize {
        self.len
    }

    fn sample(&self, index: usize) -> Result<SegSample> {
        if index >= self.len {
            return Err(Error::invalid(format!(
                "sample {index} out of range for dataset of {}",
                self.len
            )));
        }
        Ok(render_sample(&self.spec, self.seed, index as u64))
    }

    fn classes(&self) -> usize {
        self.spec.classes()
    }
}

fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn presence_probability(freq: f64) -> f64 {
    (freq * 10.0).clamp(0.3, 1.0)
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// The sample with the given id; does not validate `spec`.
pub fn render_sample(spec: &SceneSpec, seed: u64, id: u64) -> SegSample {
    let mut rng = sample_rng(seed, id);
    let (h, w) = (spec.height, spec.width);
    let hw = h * w;
    let m = spec.classes();

    let mut mask = vec![0.0; m * hw];
    for (k, &freq) in spec.frequencies.iter().enumerate() {
        let q = presence_probability(freq);
        let present = freq > 0.0 && (q >= 1.0 || rng.random_bool(q));
        if !present {
            continue;
        }
        let target = ((freq / q).min(1.0) * hw as f64).round() as usize;
        let mut canvas = Canvas::new(h, w);
        canvas.cover(&mut rng, target, &spec.shapes, k);
        let plane = &mut mask[(k + 1) * hw..(k + 2) * hw];
        for (dst, &on) in plane.iter_mut().zip(canvas.pixels()) {
            *dst = f64::from(u8::from(on));
        }
    }
    for p in 0..hw {
        let any = (1..m).any(|c| mask[c * hw + p] > 0.0);
        mask[p] = if any { 0.0 } else { 1.0 };
    }

    // Modality A: class colours over a textured field.
    let texture = raster::texture(&mut rng, h, w);
    let jitter: Vec<f64> = (0..3).map(|_| rng.random_range(-0.05..0.05)).collect();
    let mut clean = vec![0.0; 3 * hw];
    for p in 0..hw {
        let mut color = BACKGROUND_COLOR;
        for c in 1..m {
            if mask[c * hw + p] > 0.0 {
                let cc = CLASS_COLORS[(c - 1) % CLASS_COLORS.len()];
                for ch in 0..3 {
                    color[ch] += CLASS_OPACITY * (cc[ch] - color[ch]);
                }
            }
        }
        for ch in 0..3 {
            let v = color[ch] + jitter[ch] + TEXTURE_AMPLITUDE * texture[p] * (1.0 + 0.5 * ch as f64);
            clean[ch * hw + p] = v.clamp(0.0, 1.0);
        }
    }

    let app = &spec.appearance;
    let mut image_a = clean.clone();
    if app.noise > 0.0 {
        for v in &mut image_a {
            *v = (*v + app.noise * gaussian(&mut rng)).clamp(0.0, 1.0);
        }
    }

    // Modality B: mixed, projected to one channel, optionally inverted,
    // affinely remapped, with its own noise.
    let weights: Vec<f64> = (0..3)
        .map(|j| (0..3).map(|i| LUMA[i] * app.mixing[i][j]).sum())
        .collect();
    let gain = uniform(&mut rng, app.gain_range);
    let offset = uniform(&mut rng, app.offset_range);
    let mut image_b = vec![0.0; hw];
    for (p, out) in image_b.iter_mut().enumerate() {
        let mut v = weights[0] * clean[p] + weights[1] * clean[hw + p] + weights[2] * clean[2 * hw + p];
        if app.invert {
            v = 1.0 - v;
        }
        v = gain * v + offset;
        if app.noise > 0.0 {
            v += app.noise * gaussian(&mut rng);
        }
        *out = v.clamp(0.0, 1.0);
    }

    SegSample {
        id,
        seed,
        image_a: Tensor::new(&[3, h, w], image_a).expect("sized above"),
        image_b: Tensor::new(&[1, h, w], image_b).expect("sized above"),
        mask: Tensor::new(&[m, h, w], mask).expect("sized above"),
    }
}

/// Mean over the first `n` samples of each class's positive-pixel fraction.
pub fn empirical_frequencies<S: SampleSource + ?Sized>(source: &S, n: usize) -> Result<Vec<f64>> {
    let n = n.min(source.len());
    if n == 0 {
        return Err(Error::invalid("no samples to measure"));
    }
    let m = source.classes();
    let mut sums = vec![0.0; m];
    for i in 0..n {
        let s = source.sample(i)?;
        let hw = s.mask.numel() / m;
        for (c, plane) in s.mask.data().chunks_exact(hw).enumerate() {
            sums[c] += plane.iter().sum::<f64>() / hw as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / n as f64).collect())
}

#[cfg(test)]
mod tests;
