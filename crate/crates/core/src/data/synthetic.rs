//! Procedural classification tasks with a domain-shift knob.
//!
//! A task is fixed by its `task_seed`: class prototypes (Gaussian blob
//! centres, or coloured image templates) come from that seed alone. The
//! `seed` passed to [`make_synthetic`] only drives per-sample noise, so the
//! same task can be sampled for pretraining, federated training and
//! evaluation without overlap. `shift` blends every prototype towards a
//! transformed version of itself; `shift = 0` is the untouched task.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Generator {
    /// Gaussian clusters in `dim` dimensions. Prototype coordinates are
    /// drawn from N(0, separation²); samples add N(0, noise²).
    Blobs {
        dim: usize,
        #[serde(default = "one")]
        separation: f64,
        #[serde(default = "one")]
        noise: f64,
    },
    /// `channels × image_size × image_size` images: each class is a sum of
    /// coloured Gaussian spots, jittered by up to one pixel and noised.
    Images {
        image_size: usize,
        #[serde(default = "three")]
        channels: usize,
        #[serde(default = "default_image_noise")]
        noise: f64,
        #[serde(default = "three")]
        spots_per_class: usize,
    },
}

fn one() -> f64 {
    1.0
}

fn three() -> usize {
    3
}

fn default_image_noise() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub generator: Generator,
    /// Domain shift in `[0, 1]`.
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub task_seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::input("synthetic task needs at least one class"));
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(Error::input(format!("shift must lie in [0, 1], got {}", self.shift)));
        }
        match &self.generator {
            Generator::Blobs { dim, noise, .. } if *dim == 0 || *noise < 0.0 => {
                Err(Error::input("blobs need dim > 0 and noise >= 0"))
            }
            Generator::Images {
                image_size,
                channels,
                noise,
                ..
            } if *image_size == 0 || *channels == 0 || *noise < 0.0 => Err(Error::input("images need positive dimensions")),
            _ => Ok(()),
        }
    }

    pub fn feature_shape(&self) -> Vec<usize> {
        match &self.generator {
            Generator::Blobs { dim, .. } => vec![*dim],
            Generator::Images {
                image_size, channels, ..
            } => vec![*channels, *image_size, *image_size],
        }
    }

    /// Class prototypes after applying the shift, one flat vector per class.
    fn prototypes(&self) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.task_seed);
        let s = self.shift;
        match &self.generator {
            Generator::Blobs { dim, separation, .. } => {
                let mut draw = || -> Vec<f64> {
                    (0..*dim)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * separation
                        })
                        .collect()
                };
                let base: Vec<Vec<f64>> = (0..self.num_classes).map(|_| draw()).collect();
                let alt: Vec<Vec<f64>> = (0..self.num_classes).map(|_| draw()).collect();
                base.iter()
                    .zip(&alt)
                    .map(|(b, a)| b.iter().zip(a).map(|(&x, &y)| ((1.0 - s) * x + s * y) as f32).collect())
                    .collect()
            }
            Generator::Images {
                image_size,
                channels,
                spots_per_class,
                ..
            } => {
                let (n, c) = (*image_size, *channels);
                (0..self.num_classes)
                    .map(|_| {
                        let t = spot_template(&mut rng, n, c, *spots_per_class);
                        let r = rotate_recolor(&t, n, c);
                        t.iter()
                            .zip(&r)
                            .map(|(&x, &y)| ((1.0 - s) * x + s * y) as f32)
                            .collect()
                    })
                    .collect()
            }
        }
    }
}

fn spot_template(rng: &mut ChaCha8Rng, n: usize, c: usize, spots: usize) -> Vec<f64> {
    let mut img = vec![0.0; c * n * n];
    let nf = n as f64;
    for _ in 0..spots {
        let cy = rng.random_range(0.0..nf);
        let cx = rng.random_range(0.0..nf);
        let sigma = rng.random_range(nf / 8.0..nf / 4.0);
        let color: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (ch, &col) in color.iter().enumerate() {
            for y in 0..n {
                for x in 0..n {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    img[(ch * n + y) * n + x] += col * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    img
}

/// 90° rotation combined with a cyclic channel shift.
fn rotate_recolor(img: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        let src_ch = (ch + 1) % c;
        for y in 0..n {
            for x in 0..n {
                out[(ch * n + y) * n + x] = img[(src_ch * n + x) * n + (n - 1 - y)];
            }
        }
    }
    out
}

/// Samples a dataset of `num_classes × samples_per_class` examples in
/// shuffled order.
pub fn make_synthetic(spec: &SyntheticTaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let protos = spec.prototypes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..spec.num_classes)
        .flat_map(|c| std::iter::repeat_n(c, spec.samples_per_class))
        .collect();
    labels.shuffle(&mut rng);

    let width: usize = spec.feature_shape().iter().product();
    let mut features = Vec::with_capacity(labels.len() * width);
    match &spec.generator {
        Generator::Blobs { noise, .. } => {
            let normal = Normal::new(0.0, *noise).map_err(|e| Error::input(e.to_string()))?;
            for &l in &labels {
                features.extend(protos[l].iter().map(|&m| m + normal.sample(&mut rng) as f32));
            }
        }
        Generator::Images {
            image_size,
            channels,
            noise,
            ..
        } => {
            let n = *image_size as isize;
            let normal = Normal::new(0.0, *noise).map_err(|e| Error::input(e.to_string()))?;
            for &l in &labels {
                let dy = rng.random_range(0..3i64) as isize - 1;
                let dx = rng.random_range(0..3i64) as isize - 1;
                let t = &protos[l];
                for ch in 0..*channels as isize {
                    for y in 0..n {
                        for x in 0..n {
                            let sy = (y - dy).rem_euclid(n);
                            let sx = (x - dx).rem_euclid(n);
                            let v = t[((ch * n + sy) * n + sx) as usize];
                            features.push(v + normal.sample(&mut rng) as f32);
                        }
                    }
                }
            }
        }
    }
    Dataset::new(features, spec.feature_shape(), labels, spec.num_classes)
}
