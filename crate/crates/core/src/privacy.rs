//! Gaussian-mechanism differential privacy inside local optimization.
//!
//! Each local iteration clips the gradient of the trainable parameters to
//! L2 norm `S` and adds i.i.d. `N(0, σ²)` noise per coordinate. Frozen
//! parameters carry no gradient and therefore never see noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Clip each sample's gradient before averaging instead of the batch mean.
    #[serde(default)]
    pub per_sample: bool,
}

fn default_epsilon() -> f64 {
    5.0
}

fn default_delta() -> f64 {
    1e-3
}

fn default_clip() -> f64 {
    1.0
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: default_epsilon(),
            delta: default_delta(),
            clip_norm: default_clip(),
            per_sample: false,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!("dp delta must lie in (0, 1), got {}", self.delta)));
        }
        self.sigma().map(|_| ())
    }

    pub fn sigma(&self) -> Result<f64> {
        gaussian_sigma(self.epsilon, self.delta, self.clip_norm)
    }
}

/// Classical calibration `σ = S·sqrt(2 ln(1.25/δ)) / ε`.
pub fn gaussian_sigma(epsilon: f64, delta: f64, clip_norm: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::input(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(clip_norm > 0.0) || !clip_norm.is_finite() {
        return Err(Error::input(format!("clip norm must be positive, got {clip_norm}")));
    }
    if !(delta > 0.0) {
        return Err(Error::input(format!("delta must be positive, got {delta}")));
    }
    if delta >= 1.25 {
        return Err(Error::Domain(format!("delta must be below 1.25, got {delta}")));
    }
    Ok(clip_norm * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// L2 norm over all present gradient buffers, accumulated in `f64`.
pub fn gradient_norm<T: Real>(grads: &[Option<Vec<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// `g ← g · min(1, S/‖g‖₂)` over the concatenation of all buffers. Returns
/// the applied factor.
pub fn clip_gradient<T: Real>(grads: &mut [Option<Vec<T>>], clip_norm: f64) -> f64 {
    let norm = gradient_norm(grads);
    if norm <= clip_norm {
        return 1.0;
    }
    let factor = clip_norm / norm;
    let f = T::c(factor);
    for v in grads.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
        *v *= f;
    }
    factor
}

/// Adds `N(0, σ²)` to every present coordinate, in buffer order.
pub fn add_gaussian_noise<T: Real, R: Rng + ?Sized>(grads: &mut [Option<Vec<T>>], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    for v in grads.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
        let z: f64 = StandardNormal.sample(rng);
        *v += T::c(sigma * z);
    }
}

/// Clip, then noise. With `per_sample` set the caller is expected to have
/// clipped per-sample gradients already; the batch-level clip is then a
/// no-op up to rounding, since an average of vectors with norm ≤ S has norm ≤ S.
pub fn dp_step<T: Real, R: Rng + ?Sized>(grads: &mut [Option<Vec<T>>], cfg: &DpConfig, rng: &mut R) -> Result<()> {
    if !cfg.enabled {
        return Ok(());
    }
    let sigma = cfg.sigma()?;
    if !cfg.per_sample {
        clip_gradient(grads, cfg.clip_norm);
    }
    add_gaussian_noise(grads, sigma, rng);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigma_reference_value() {
        let s = gaussian_sigma(5.0, 1e-3, 1.0).unwrap();
        assert!((s - 0.755_295).abs() < 1e-6, "{s}");
        let s2 = gaussian_sigma(5.0, 1e-3, 2.0).unwrap();
        assert_eq!(s2, 2.0 * s);
        assert!(gaussian_sigma(1e12, 1e-3, 1.0).unwrap() < 1e-11);
    }

    #[test]
    fn sigma_errors() {
        assert!(matches!(gaussian_sigma(5.0, 1.25, 1.0), Err(Error::Domain(_))));
        assert!(matches!(gaussian_sigma(0.0, 1e-3, 1.0), Err(Error::Input(_))));
        assert!(matches!(gaussian_sigma(5.0, 1e-3, -1.0), Err(Error::Input(_))));
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Some(vec![0.3f64, 0.4]), None];
        assert_eq!(clip_gradient(&mut g, 1.0), 1.0);
        assert_eq!(g[0].as_deref(), Some(&[0.3, 0.4][..]));

        let mut g = vec![Some(vec![1.2f64]), None, Some(vec![1.6])];
        clip_gradient(&mut g, 1.0);
        assert!((gradient_norm(&g) - 1.0).abs() < 1e-15);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn disabled_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = vec![Some(vec![10.0f32, -3.0])];
        dp_step(&mut g, &DpConfig::default(), &mut rng).unwrap();
        assert_eq!(g[0].as_deref(), Some(&[10.0, -3.0][..]));
    }

    #[test]
    fn frozen_entries_stay_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DpConfig {
            enabled: true,
            ..DpConfig::default()
        };
        let mut g: Vec<Option<Vec<f64>>> = vec![None, Some(vec![0.0; 3]), None];
        dp_step(&mut g, &cfg, &mut rng).unwrap();
        assert!(g[0].is_none() && g[2].is_none());
        assert!(g[1].as_ref().unwrap().iter().all(|v| *v != 0.0));
    }
}
