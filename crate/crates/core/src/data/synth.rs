use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

/// Per-class template families. For class `k` of `m` on an `s×s` canvas:
///
/// - `Bars`: a horizontal band of height `max(1, s/(2m))` centered on row `(k+½)·s/m`.
/// - `Crosses`: a diagonal × with arm length `s/4`, centered on row `s/2`, column `(k+½)·s/m`.
/// - `Blobs`: an isotropic Gaussian bump (σ = `s/8`) at angle `2πk/m` on a circle of radius `s/4`.
/// - `Rings`: a centered ring of radius `s·(0.15 + 0.3·(k+½)/m)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bars,
    Crosses,
    Blobs,
    Rings,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Bars => "bars",
            Family::Crosses => "crosses",
            Family::Blobs => "blobs",
            Family::Rings => "rings",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        [Family::Bars, Family::Crosses, Family::Blobs, Family::Rings]
            .into_iter()
            .find(|f| f.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub family: Family,
    pub classes: usize,
    /// Side length of the square canvas.
    pub size: usize,
    /// 1 (gray) or 3 (color; each class gets its own channel tint).
    pub channels: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Maximum per-sample template shift in pixels along both axes;
    /// shifts are drawn uniformly from `[−jitter, jitter]`.
    pub jitter: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(family: Family, classes: usize, size: usize, seed: u64) -> Self {
        SynthSpec {
            family,
            classes,
            size,
            channels: 1,
            noise: 0.1,
            jitter: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.size < 4 {
            return Err(Error::Contract(format!(
                "need at least one class and a 4×4 canvas, got {} classes at {}",
                self.classes, self.size
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Contract(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Contract(format!("noise {} must be finite and ≥ 0", self.noise)));
        }
        if !self.jitter.is_finite() || self.jitter < 0.0 {
            return Err(Error::Contract(format!("jitter {} must be finite and ≥ 0", self.jitter)));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.size, self.size]
    }

    /// Noise-free template of class `k` shifted by `(dy, dx)`, `[C × s × s]`.
    pub fn template(&self, k: usize, dy: f64, dx: f64) -> Vec<f64> {
        let s = self.size as f64;
        let m = self.classes as f64;
        let kf = k as f64;
        let plane: Vec<f64> = (0..self.size * self.size)
            .map(|i| {
                let y = (i / self.size) as f64 + 0.5 - dy;
                let x = (i % self.size) as f64 + 0.5 - dx;
                match self.family {
                    Family::Bars => {
                        let h = (s / (2.0 * m)).floor().max(1.0);
                        let top = ((kf + 0.5) * s / m - h / 2.0).round();
                        if y >= top && y < top + h {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Family::Crosses => {
                        let (cy, cx) = (s / 2.0, (kf + 0.5) * s / m);
                        let (ey, ex) = (y - cy, x - cx);
                        let on_arm = (ey.abs() - ex.abs()).abs() < 0.75;
                        if on_arm && ex.abs() <= s / 4.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Family::Blobs => {
                        let a = 2.0 * std::f64::consts::PI * kf / m;
                        let (cy, cx) = (s / 2.0 + s / 4.0 * a.sin(), s / 2.0 + s / 4.0 * a.cos());
                        let sigma = s / 8.0;
                        (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp()
                    }
                    Family::Rings => {
                        let r = s * (0.15 + 0.3 * (kf + 0.5) / m);
                        let d = ((y - s / 2.0).powi(2) + (x - s / 2.0).powi(2)).sqrt();
                        (-(d - r).powi(2) / (2.0 * 0.6 * 0.6)).exp()
                    }
                }
            })
            .collect();
        (0..self.channels)
            .flat_map(|c| {
                let tint = if self.channels == 1 {
                    1.0
                } else {
                    [1.0, 0.6, 0.3][(c + k) % 3]
                };
                plane.iter().map(move |v| v * tint)
            })
            .collect()
    }

    fn draw(&self, n: usize, split: Split, rng: &mut Stream) -> Result<Dataset> {
        let per = self.channels * self.size * self.size;
        let mut data = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        let j = self.jitter;
        for i in 0..n {
            let k = i % self.classes;
            let (dy, dx) = if j > 0.0 {
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            } else {
                (0.0, 0.0)
            };
            for v in self.template(k, dy, dx) {
                let noisy = if self.noise > 0.0 {
                    v + self.noise * rng.sample::<f64, _>(StandardNormal)
                } else {
                    v
                };
                data.push(noisy.clamp(0.0, 1.0));
            }
            labels.push(k);
        }
        let images = Tensor::new(vec![n, self.channels, self.size, self.size], data)?;
        Dataset::new(self.family.name(), split, images, labels, self.classes)
    }
}

/// Deterministic train/test pair; labels cycle through the classes and the
/// two splits draw from independent seed-derived streams.
pub fn synth_dataset(spec: &SynthSpec, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if n_train < spec.classes || n_test < spec.classes {
        return Err(Error::Contract(format!(
            "each split needs at least {} samples, got {n_train}/{n_test}",
            spec.classes
        )));
    }
    let train = spec.draw(n_train, Split::Train, &mut seed::stream(spec.seed, "synth/train"))?;
    let test = spec.draw(n_test, Split::Test, &mut seed::stream(spec.seed, "synth/test"))?;
    Ok((train, test))
}
