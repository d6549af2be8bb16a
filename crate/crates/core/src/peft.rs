//! Tuning modes: which parameters train and travel, and the modules some
//! modes inject into the backbone.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GlobalModel;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Adapter bottleneck, either as an absolute width or as `embed_dim / factor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    Width(usize),
    ReductionFactor(usize),
}

impl Default for Bottleneck {
    fn default() -> Self {
        Bottleneck::ReductionFactor(8)
    }
}

/// Initial values of the prompt tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    /// Uniform in `(-bound, bound)`.
    Uniform { bound: f64 },
    Zeros,
}

impl Default for PromptInit {
    fn default() -> Self {
        PromptInit::Uniform { bound: 0.08 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TuningMode {
    /// Everything trains and travels.
    Full,
    /// Only the classification head.
    Head,
    /// Backbone bias terms plus the head.
    Bias,
    /// Bottleneck adapters after every feed-forward block, plus the head.
    Adapter {
        #[serde(default)]
        bottleneck: Bottleneck,
    },
    /// Per-layer prompt tokens, plus the head.
    Prompt {
        #[serde(default = "default_prompt_length")]
        length: usize,
        #[serde(default)]
        init: PromptInit,
    },
}

fn default_prompt_length() -> usize {
    10
}

impl TuningMode {
    pub fn name(&self) -> &'static str {
        match self {
            TuningMode::Full => "full",
            TuningMode::Head => "head",
            TuningMode::Bias => "bias",
            TuningMode::Adapter { .. } => "adapter",
            TuningMode::Prompt { .. } => "prompt",
        }
    }

    /// Parses a mode name using the default hyperparameters for that mode.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "full" => TuningMode::Full,
            "head" => TuningMode::Head,
            "bias" => TuningMode::Bias,
            "adapter" => TuningMode::Adapter {
                bottleneck: Bottleneck::default(),
            },
            "prompt" => TuningMode::Prompt {
                length: default_prompt_length(),
                init: PromptInit::default(),
            },
            other => return Err(Error::input(format!("unknown tuning mode `{other}`"))),
        })
    }

    pub fn is_peft(&self) -> bool {
        !matches!(self, TuningMode::Full)
    }

    /// The five rows of the communication table: adapter at fixed width 8,
    /// prompts of length 10.
    pub fn table1_modes() -> [TuningMode; 5] {
        [
            TuningMode::Full,
            TuningMode::Head,
            TuningMode::Bias,
            TuningMode::Adapter {
                bottleneck: Bottleneck::Width(8),
            },
            TuningMode::Prompt {
                length: 10,
                init: PromptInit::default(),
            },
        ]
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Applies `mode` to a freshly built (or checkpoint-loaded) model.
///
/// Injected adapters start with a zero up-projection, so the model output is
/// unchanged until they are trained.
pub fn apply_mode<T: Real>(mut model: GlobalModel<T>, mode: TuningMode, seed: u64) -> Result<GlobalModel<T>> {
    model.set_mode(mode, seed)?;
    Ok(model)
}

/// Forward pass of a prompt-tuned model. Each block sees its prompt tokens
/// prepended; they are stripped again before the next block.
pub fn forward_with_prompts<T: Real>(model: &GlobalModel<T>, g: &mut Graph<T>, input: &Tensor<T>) -> Result<Var> {
    if !matches!(model.mode(), Some(TuningMode::Prompt { .. })) {
        return Err(Error::contract("forward_with_prompts needs a prompt-tuned model"));
    }
    model.forward(g, input).map(|f| f.logits)
}

/// Forward pass of an adapter-tuned model.
pub fn forward_with_adapters<T: Real>(model: &GlobalModel<T>, g: &mut Graph<T>, input: &Tensor<T>) -> Result<Var> {
    if !matches!(model.mode(), Some(TuningMode::Adapter { .. })) {
        return Err(Error::contract("forward_with_adapters needs an adapter-tuned model"));
    }
    model.forward(g, input).map(|f| f.logits)
}
