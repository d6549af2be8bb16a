use serde::{Deserialize, Serialize};

use super::spec::{bottleneck_width, ModelSpec};
use crate::error::{Error, Result};
use crate::peft::TuningMode;
use crate::tensor::numel;

/// What a parameter is for; decides which tuning modes train it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    BackboneWeight,
    BackboneBias,
    Head,
    Adapter,
    Prompt,
}

impl Role {
    pub(crate) fn code(self) -> u8 {
        match self {
            Role::BackboneWeight => 0,
            Role::BackboneBias => 1,
            Role::Head => 2,
            Role::Adapter => 3,
            Role::Prompt => 4,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Role::BackboneWeight,
            1 => Role::BackboneBias,
            2 => Role::Head,
            3 => Role::Adapter,
            4 => Role::Prompt,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub trainable: bool,
    pub transmitted: bool,
}

impl ParamEntry {
    fn new(name: impl Into<String>, shape: Vec<usize>, role: Role) -> Self {
        Self {
            name: name.into(),
            shape,
            role,
            trainable: true,
            transmitted: true,
        }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Flat, ordered catalogue of every model parameter.
///
/// The transmitted entries form the set that is exchanged with the server;
/// their registry order fixes the layout of the flat exchange vector.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParameterRegistry {
    entries: Vec<ParamEntry>,
}

impl ParameterRegistry {
    /// Base (un-modified) parameters for a spec. Everything starts trainable.
    pub fn for_spec(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut r = Self::default();
        match spec {
            ModelSpec::Mlp(s) => {
                let mut fan_in = s.input_dim;
                for (i, &h) in s.hidden_dims.iter().enumerate() {
                    r.push(ParamEntry::new(format!("layers.{i}.weight"), vec![fan_in, h], Role::BackboneWeight))?;
                    r.push(ParamEntry::new(format!("layers.{i}.bias"), vec![h], Role::BackboneBias))?;
                    fan_in = h;
                }
                r.push(ParamEntry::new("head.weight", vec![fan_in, s.num_classes], Role::Head))?;
                r.push(ParamEntry::new("head.bias", vec![s.num_classes], Role::Head))?;
            }
            ModelSpec::Vit(s) => {
                let d = s.embed_dim;
                let h = s.mlp_hidden_dim;
                use Role::{BackboneBias as B, BackboneWeight as W};
                r.push(ParamEntry::new("patch_embed.weight", vec![s.patch_dim(), d], W))?;
                r.push(ParamEntry::new("patch_embed.bias", vec![d], B))?;
                r.push(ParamEntry::new("cls_token", vec![1, d], W))?;
                r.push(ParamEntry::new("pos_embed", vec![s.seq_len(), d], W))?;
                for i in 0..s.depth {
                    let p = |n: &str| format!("blocks.{i}.{n}");
                    r.push(ParamEntry::new(p("norm1.weight"), vec![d], W))?;
                    r.push(ParamEntry::new(p("norm1.bias"), vec![d], B))?;
                    r.push(ParamEntry::new(p("attn.qkv.weight"), vec![d, 3 * d], W))?;
                    r.push(ParamEntry::new(p("attn.qkv.bias"), vec![3 * d], B))?;
                    r.push(ParamEntry::new(p("attn.proj.weight"), vec![d, d], W))?;
                    r.push(ParamEntry::new(p("attn.proj.bias"), vec![d], B))?;
                    r.push(ParamEntry::new(p("norm2.weight"), vec![d], W))?;
                    r.push(ParamEntry::new(p("norm2.bias"), vec![d], B))?;
                    r.push(ParamEntry::new(p("mlp.fc1.weight"), vec![d, h], W))?;
                    r.push(ParamEntry::new(p("mlp.fc1.bias"), vec![h], B))?;
                    r.push(ParamEntry::new(p("mlp.fc2.weight"), vec![h, d], W))?;
                    r.push(ParamEntry::new(p("mlp.fc2.bias"), vec![d], B))?;
                }
                r.push(ParamEntry::new("norm.weight", vec![d], W))?;
                r.push(ParamEntry::new("norm.bias", vec![d], B))?;
                r.push(ParamEntry::new("head.weight", vec![d, s.num_classes], Role::Head))?;
                r.push(ParamEntry::new("head.bias", vec![s.num_classes], Role::Head))?;
            }
        }
        Ok(r)
    }

    /// Injects mode-specific modules and sets the trainable/transmitted flags.
    /// Returns the index of the first injected entry.
    pub fn apply_mode(&mut self, spec: &ModelSpec, mode: &TuningMode) -> Result<usize> {
        let first_new = self.entries.len();
        match (spec, mode) {
            (_, TuningMode::Full | TuningMode::Head | TuningMode::Bias) => {}
            (ModelSpec::Vit(s), TuningMode::Adapter { bottleneck }) => {
                let b = bottleneck_width(*bottleneck, s.embed_dim)?;
                let d = s.embed_dim;
                for i in 0..s.depth {
                    let p = |n: &str| format!("blocks.{i}.adapter.{n}");
                    self.push(ParamEntry::new(p("down.weight"), vec![d, b], Role::Adapter))?;
                    self.push(ParamEntry::new(p("down.bias"), vec![b], Role::Adapter))?;
                    self.push(ParamEntry::new(p("up.weight"), vec![b, d], Role::Adapter))?;
                    self.push(ParamEntry::new(p("up.bias"), vec![d], Role::Adapter))?;
                }
            }
            (ModelSpec::Vit(s), TuningMode::Prompt { length, .. }) => {
                self.push(ParamEntry::new(
                    "prompt_tokens",
                    vec![s.depth, *length, s.embed_dim],
                    Role::Prompt,
                ))?;
            }
            (ModelSpec::Mlp(_), _) => {
                return Err(Error::input(format!(
                    "mode {} is only defined for the vit family",
                    mode.name()
                )))
            }
        }
        for e in &mut self.entries {
            let on = match mode {
                TuningMode::Full => true,
                TuningMode::Head => e.role == Role::Head,
                TuningMode::Bias => matches!(e.role, Role::Head | Role::BackboneBias),
                TuningMode::Adapter { .. } => matches!(e.role, Role::Head | Role::Adapter),
                TuningMode::Prompt { .. } => matches!(e.role, Role::Head | Role::Prompt),
            };
            e.trainable = on;
            e.transmitted = on;
        }
        Ok(first_new)
    }

    pub(crate) fn push(&mut self, entry: ParamEntry) -> Result<()> {
        if self.entries.iter().any(|e| e.name == entry.name) {
            return Err(Error::contract(format!("duplicate parameter {}", entry.name)));
        }
        if entry.transmitted && !entry.trainable {
            return Err(Error::contract(format!("{} is transmitted but frozen", entry.name)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    pub fn total_count(&self) -> u64 {
        self.entries.iter().map(|e| e.numel() as u64).sum()
    }

    pub fn trainable_count(&self) -> u64 {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.numel() as u64).sum()
    }

    pub fn transmitted_count(&self) -> u64 {
        self.entries.iter().filter(|e| e.transmitted).map(|e| e.numel() as u64).sum()
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.trainable).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::MlpSpec;

    #[test]
    fn mlp_registry_layout() {
        let spec = ModelSpec::Mlp(MlpSpec {
            input_dim: 784,
            hidden_dims: vec![256],
            num_classes: 10,
        });
        let r = ParameterRegistry::for_spec(&spec).unwrap();
        let roles: Vec<Role> = r.entries().iter().map(|e| e.role).collect();
        assert_eq!(
            roles,
            vec![Role::BackboneWeight, Role::BackboneBias, Role::Head, Role::Head]
        );
        assert_eq!(r.entries()[2].shape, vec![256, 10]);
    }

    #[test]
    fn vit_b_bias_mode_without_weights() {
        let spec = ModelSpec::vit_b(100);
        let mut r = ParameterRegistry::for_spec(&spec).unwrap();
        assert_eq!(r.total_count(), 85_875_556);
        r.apply_mode(&spec, &TuningMode::Bias).unwrap();
        assert_eq!(r.trainable_count(), 179_812);
        assert_eq!(r.transmitted_count(), 179_812);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut r = ParameterRegistry::default();
        r.push(ParamEntry::new("a", vec![1], Role::Head)).unwrap();
        assert!(r.push(ParamEntry::new("a", vec![2], Role::Head)).is_err());
    }
}
