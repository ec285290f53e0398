use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Class-conditional Gaussian-blob images: every class owns a fixed
/// prototype (a sum of a few isotropic blobs) and each example is that
/// prototype plus i.i.d. pixel noise, optionally shifted, clipped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_blobs")]
    pub blobs_per_class: usize,
    /// Maximum per-example translation of the prototype, in pixels.
    #[serde(default)]
    pub jitter: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_channels() -> usize {
    1
}
fn default_noise() -> f64 {
    0.25
}
fn default_blobs() -> usize {
    3
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_classes,
            train_per_class: per_class,
            test_per_class: (per_class / 4).max(1),
            image_size,
            channels: default_channels(),
            noise: default_noise(),
            blobs_per_class: default_blobs(),
            jitter: 0,
            seed,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.train_per_class < 2 {
            return Err(Error::Config(format!(
                "train_per_class = {} (at least 2 required)",
                self.train_per_class
            )));
        }
        if self.test_per_class < 1 || self.image_size < 2 || self.channels < 1 {
            return Err(Error::Config(
                "test_per_class, channels >= 1 and image_size >= 2 required".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise = {}", self.noise)));
        }
        Ok(())
    }

    /// Noise-free class prototypes `[K, C, S, S]`.
    pub fn prototypes(&self) -> Result<Tensor> {
        self.validate()?;
        let mut r = rng::rng(self.seed);
        let s = self.image_size;
        let plane = s * s;
        let mut data = vec![0.0; self.num_classes * self.channels * plane];
        for proto in data.chunks_mut(self.channels * plane) {
            for ch in proto.chunks_mut(plane) {
                for _ in 0..self.blobs_per_class.max(1) {
                    let cy = r.random_range(0.0..s as f64);
                    let cx = r.random_range(0.0..s as f64);
                    let radius = r.random_range(s as f64 / 8.0..s as f64 / 3.0).max(0.5);
                    let amp = r.random_range(0.5..1.0);
                    for y in 0..s {
                        for x in 0..s {
                            let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                            ch[y * s + x] += amp * (-d2 / (2.0 * radius * radius)).exp();
                        }
                    }
                }
                ch.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
        }
        Tensor::new(vec![self.num_classes, self.channels, s, s], data)
    }
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let protos = spec.prototypes()?;
    // Separate streams so changing the split sizes never moves the prototypes.
    let train = sample_split(spec, &protos, spec.train_per_class, rng::splitmix64(spec.seed ^ 0x7472))?;
    let test = sample_split(spec, &protos, spec.test_per_class, rng::splitmix64(spec.seed ^ 0x7465))?;
    Dataset::new(train, test, spec.num_classes)
}

fn sample_split(spec: &SyntheticSpec, protos: &Tensor, per_class: usize, seed: u64) -> Result<Split> {
    let mut r = rng::rng(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (c, s) = (spec.channels, spec.image_size);
    let ex = c * s * s;
    let n = spec.num_classes * per_class;
    let mut data = Vec::with_capacity(n * ex);
    let mut labels = Vec::with_capacity(n);
    let j = spec.jitter as isize;
    for _ in 0..per_class {
        for k in 0..spec.num_classes {
            let proto = &protos.data()[k * ex..(k + 1) * ex];
            let (dy, dx) = if j > 0 {
                (r.random_range(-j as i64..=j as i64) as isize, r.random_range(-j as i64..=j as i64) as isize)
            } else {
                (0, 0)
            };
            for ch in 0..c {
                for y in 0..s as isize {
                    for x in 0..s as isize {
                        let (sy, sx) = (y - dy, x - dx);
                        let base = if sy >= 0 && sy < s as isize && sx >= 0 && sx < s as isize {
                            proto[ch * s * s + sy as usize * s + sx as usize]
                        } else {
                            0.0
                        };
                        let noise = if spec.noise > 0.0 {
                            spec.noise * normal.sample(&mut r)
                        } else {
                            0.0
                        };
                        data.push((base + noise).clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(k);
        }
    }
    Split::new(Tensor::new(vec![n, c, s, s], data)?, labels)
}
