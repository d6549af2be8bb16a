use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability of a horizontal flip per sample; only applies to
    /// `[channels, height, width]` features.
    #[serde(default)]
    pub horizontal_flip: f64,
}

/// Mirrors an image along its width, in place. `shape` is `[C, H, W]`.
pub fn horizontal_flip(sample: &mut [f32], shape: &[usize]) {
    let [c, h, w] = shape else { return };
    for row in sample.chunks_exact_mut(*w).take(c * h) {
        row.reverse();
    }
}

/// Applies the configured stochastic augmentations; returns whether the
/// sample was flipped.
pub fn augment<R: Rng + ?Sized>(sample: &mut [f32], shape: &[usize], cfg: &AugmentConfig, rng: &mut R) -> bool {
    if shape.len() != 3 || cfg.horizontal_flip <= 0.0 {
        return false;
    }
    let flip = cfg.horizontal_flip >= 1.0 || rng.random_bool(cfg.horizontal_flip);
    if flip {
        horizontal_flip(sample, shape);
    }
    flip
}
