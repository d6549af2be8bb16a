use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Plain SGD with decoupled-into-gradient weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted: it is the identity-training probe used by several checks.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning_rate must be a non-negative finite number, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// `θ ← θ − lr·(g + wd·θ)` for every trainable tensor, then clears all gradients.
///
/// Frozen tensors are never modified, even if a gradient was attached to them.
pub fn sgd_step<T: Real>(params: &mut [Tensor<T>], trainable: &[bool], cfg: &SgdConfig) -> Result<()> {
    if params.len() != trainable.len() {
        return Err(Error::contract("trainable mask length differs from parameter count"));
    }
    if let Some(i) = params
        .iter()
        .zip(trainable)
        .position(|(p, &t)| t && p.grad().is_none())
    {
        return Err(Error::contract(format!("trainable parameter #{i} has no gradient")));
    }
    let lr = T::c(cfg.learning_rate);
    let wd = T::c(cfg.weight_decay);
    for (p, &t) in params.iter_mut().zip(trainable) {
        let grad = p.take_grad();
        if !t {
            continue;
        }
        let grad = grad.expect("checked above");
        for (w, g) in p.data_mut().iter_mut().zip(grad) {
            *w -= lr * (g + wd * *w);
        }
    }
    Ok(())
}
