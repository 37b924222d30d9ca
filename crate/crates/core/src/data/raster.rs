use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ShapeKind;

/// Binary raster for a single class.
pub(super) struct Canvas {
    h: usize,
    w: usize,
    pixels: Vec<bool>,
    covered: usize,
}

const MAX_SHAPES: usize = 48;
const MIN_SHAPE_AREA: f64 = 4.0;

impl Canvas {
    pub fn new(h: usize, w: usize) -> Self {
        Canvas {
            h,
            w,
            pixels: vec![false; h * w],
            covered: 0,
        }
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    fn set(&mut self, y: usize, x: usize) {
        let p = &mut self.pixels[y * self.w + x];
        if !*p {
            *p = true;
            self.covered += 1;
        }
    }

    /// Add shapes until at least `target` pixels are set. The class index
    /// biases which shape of the vocabulary is preferred.
    pub fn cover(&mut self, rng: &mut ChaCha8Rng, target: usize, vocab: &[ShapeKind], class: usize) {
        if target >= self.h * self.w {
            self.pixels.fill(true);
            self.covered = self.h * self.w;
            return;
        }
        let preferred = vocab[class % vocab.len()];
        for _ in 0..MAX_SHAPES {
            if self.covered >= target {
                break;
            }
            let remaining = (target - self.covered) as f64;
            let area = (remaining * rng.random_range(0.7..1.3)).max(MIN_SHAPE_AREA);
            let kind = if rng.random_bool(0.7) {
                preferred
            } else {
                vocab[rng.random_range(0..vocab.len())]
            };
            match kind {
                ShapeKind::Ellipse => self.ellipse(rng, area),
                ShapeKind::Band => self.band(rng, area),
                ShapeKind::Blob => self.blob(rng, area),
            }
        }
    }

    fn center(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        (
            rng.random_range(0.0..self.h as f64),
            rng.random_range(0.0..self.w as f64),
        )
    }

    fn fill_where(&mut self, bbox: (f64, f64, f64, f64), inside: impl Fn(f64, f64) -> bool) {
        let (y0, y1, x0, x1) = bbox;
        let ys = y0.floor().max(0.0) as usize..(y1.ceil().max(0.0) as usize).min(self.h);
        let xs = x0.floor().max(0.0) as usize..(x1.ceil().max(0.0) as usize).min(self.w);
        for y in ys {
            for x in xs.clone() {
                if inside(y as f64 + 0.5, x as f64 + 0.5) {
                    self.set(y, x);
                }
            }
        }
    }

    fn ellipse(&mut self, rng: &mut ChaCha8Rng, area: f64) {
        let (cy, cx) = self.center(rng);
        let aspect: f64 = rng.random_range(0.5..2.0);
        let theta = rng.random_range(0.0..PI);
        let a = (area * aspect / PI).sqrt();
        let b = area / (PI * a);
        let (s, c) = theta.sin_cos();
        let r = a.max(b);
        self.fill_where((cy - r, cy + r, cx - r, cx + r), |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        });
    }

    fn band(&mut self, rng: &mut ChaCha8Rng, area: f64) {
        let (cy, cx) = self.center(rng);
        let theta = rng.random_range(0.0..PI);
        let span = (self.h + self.w) as f64 / 2.0;
        let length = rng.random_range(0.5..1.0) * span;
        let width = (area / length).max(1.5);
        let (s, c) = theta.sin_cos();
        let r = length / 2.0 + width;
        self.fill_where((cy - r, cy + r, cx - r, cx + r), |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            let along = c * dx + s * dy;
            let across = -s * dx + c * dy;
            along.abs() <= length / 2.0 && across.abs() <= width / 2.0
        });
    }

    fn blob(&mut self, rng: &mut ChaCha8Rng, area: f64) {
        let (cy, cx) = self.center(rng);
        let k = rng.random_range(3..=6);
        let base = (area / (k as f64 * PI)).sqrt();
        for _ in 0..k {
            let r = base * rng.random_range(0.8..1.25);
            let angle = rng.random_range(0.0..2.0 * PI);
            let dist = rng.random_range(0.0..1.2) * base;
            let (py, px) = (cy + dist * angle.sin(), cx + dist * angle.cos());
            self.fill_where((py - r, py + r, px - r, px + r), |y, x| {
                (y - py).powi(2) + (x - px).powi(2) <= r * r
            });
        }
    }
}

/// Smooth zero-mean field in roughly `[-1, 1]`: a few random plane waves.
pub(super) fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    const WAVES: usize = 4;
    let mut out = vec![0.0; h * w];
    for _ in 0..WAVES {
        let theta = rng.random_range(0.0..2.0 * PI);
        let freq = rng.random_range(0.05..0.4);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.5..1.0) / WAVES as f64;
        // sin(u + v) split into per-column and per-row factors.
        let cols: Vec<(f64, f64)> = (0..w).map(|x| (freq * x as f64 * theta.cos()).sin_cos()).collect();
        let rows: Vec<(f64, f64)> = (0..h)
            .map(|y| (freq * y as f64 * theta.sin() + phase).sin_cos())
            .collect();
        for (y, &(sv, cv)) in rows.iter().enumerate() {
            for (x, &(su, cu)) in cols.iter().enumerate() {
                out[y * w + x] += amp * (su * cv + cu * sv);
            }
        }
    }
    out
}
