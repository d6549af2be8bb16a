//! Architecture descriptions and closed-form parameter counts.
//!
//! Nothing here allocates weights, so the counts for full-size backbones
//! are cheap to compute.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::{Bottleneck, TuningMode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitSpec {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub embed_dim: usize,
    pub mlp_hidden_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub num_classes: usize,
}

fn default_channels() -> usize {
    3
}

impl VitSpec {
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patch tokens plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Model family plus its dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelSpec {
    Mlp(MlpSpec),
    Vit(VitSpec),
}

impl ModelSpec {
    /// ViT-Base/16 at 224px.
    pub fn vit_b(num_classes: usize) -> Self {
        ModelSpec::Vit(VitSpec {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            mlp_hidden_dim: 3072,
            depth: 12,
            num_heads: 12,
            num_classes,
        })
    }

    /// Desk-scale transformer used for trainable runs.
    pub fn mini_vit(num_classes: usize) -> Self {
        ModelSpec::Vit(VitSpec {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            mlp_hidden_dim: 256,
            depth: 4,
            num_heads: 4,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Mlp(s) => s.num_classes,
            ModelSpec::Vit(s) => s.num_classes,
        }
    }

    /// Shape of one raw input sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelSpec::Mlp(s) => vec![s.input_dim],
            ModelSpec::Vit(s) => vec![s.channels, s.image_size, s.image_size],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp(s) => {
                if s.input_dim == 0 || s.num_classes == 0 || s.hidden_dims.contains(&0) {
                    return Err(Error::input("mlp dimensions must be positive"));
                }
            }
            ModelSpec::Vit(s) => {
                let dims = [
                    s.image_size,
                    s.patch_size,
                    s.channels,
                    s.embed_dim,
                    s.mlp_hidden_dim,
                    s.depth,
                    s.num_heads,
                    s.num_classes,
                ];
                if dims.contains(&0) {
                    return Err(Error::input("vit dimensions must be positive"));
                }
                if s.image_size % s.patch_size != 0 {
                    return Err(Error::input(format!(
                        "image_size {} is not divisible by patch_size {}",
                        s.image_size, s.patch_size
                    )));
                }
                if s.embed_dim % s.num_heads != 0 {
                    return Err(Error::input(format!(
                        "embed_dim {} is not divisible by num_heads {}",
                        s.embed_dim, s.num_heads
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parameter counts for a (spec, mode) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    /// Every parameter of the model, injected modules included.
    pub total: u64,
    pub tuned: u64,
    pub transmitted: u64,
}

fn linear(fan_in: u64, fan_out: u64) -> u64 {
    fan_in * fan_out + fan_out
}

/// Resolves an adapter bottleneck against the embedding width.
pub fn bottleneck_width(bottleneck: Bottleneck, embed_dim: usize) -> Result<usize> {
    let w = match bottleneck {
        Bottleneck::Width(w) => w,
        Bottleneck::ReductionFactor(f) if f > 0 => embed_dim / f,
        Bottleneck::ReductionFactor(_) => 0,
    };
    if w == 0 {
        return Err(Error::input(format!(
            "adapter bottleneck {bottleneck:?} gives zero width for embed_dim {embed_dim}"
        )));
    }
    Ok(w)
}

/// Closed-form parameter counts, computed without building the model.
pub fn count_params(spec: &ModelSpec, mode: &TuningMode) -> Result<ParamCounts> {
    spec.validate()?;
    match spec {
        ModelSpec::Mlp(s) => {
            let mut backbone_w = 0u64;
            let mut backbone_b = 0u64;
            let mut fan_in = s.input_dim as u64;
            for &h in &s.hidden_dims {
                backbone_w += fan_in * h as u64;
                backbone_b += h as u64;
                fan_in = h as u64;
            }
            let head = linear(fan_in, s.num_classes as u64);
            let total = backbone_w + backbone_b + head;
            let tuned = match mode {
                TuningMode::Full => total,
                TuningMode::Head => head,
                TuningMode::Bias => backbone_b + head,
                TuningMode::Adapter { .. } | TuningMode::Prompt { .. } => {
                    return Err(Error::input(format!(
                        "mode {} is only defined for the vit family",
                        mode.name()
                    )))
                }
            };
            Ok(ParamCounts {
                total,
                tuned,
                transmitted: tuned,
            })
        }
        ModelSpec::Vit(s) => {
            let d = s.embed_dim as u64;
            let h = s.mlp_hidden_dim as u64;
            let depth = s.depth as u64;
            let patch = linear(s.patch_dim() as u64, d);
            let cls = d;
            let pos = s.seq_len() as u64 * d;
            let block = linear(d, 3 * d) + linear(d, d) + linear(d, h) + linear(h, d) + 2 * 2 * d;
            let final_norm = 2 * d;
            let head = linear(d, s.num_classes as u64);
            let base = patch + cls + pos + depth * block + final_norm + head;

            // qkv, proj, fc1, fc2 and both norm shifts
            let block_bias = 3 * d + d + h + d + 2 * d;
            let (extra, tuned) = match *mode {
                TuningMode::Full => (0, base),
                TuningMode::Head => (0, head),
                TuningMode::Bias => (0, depth * block_bias + d + d + head),
                TuningMode::Adapter { bottleneck } => {
                    let b = bottleneck_width(bottleneck, s.embed_dim)? as u64;
                    let adapters = depth * (linear(d, b) + linear(b, d));
                    (adapters, adapters + head)
                }
                TuningMode::Prompt { length, .. } => {
                    let prompts = depth * length as u64 * d;
                    (prompts, prompts + head)
                }
            };
            let total = base + extra;
            let tuned = if matches!(mode, TuningMode::Full) { total } else { tuned };
            Ok(ParamCounts {
                total,
                tuned,
                transmitted: tuned,
            })
        }
    }
}
