use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_csv, load_idx, make_synthetic, AugmentConfig, Dataset, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::federation::{FederationConfig, LocalTraining};
use crate::model::{count_params, ModelSpec};
use crate::peft::TuningMode;
use crate::privacy::DpConfig;
use crate::tensor::{Precision, SgdConfig};

/// Schema version of the experiment file.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub model: ModelSpec,
    #[serde(default = "default_mode")]
    pub mode: TuningMode,
    pub data: DataConfig,
    pub federation: FederationSection,
    #[serde(default)]
    pub sgd: SgdSection,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_mode() -> TuningMode {
    TuningMode::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    pub eval: DataSource,
    /// Keeps at most this many training samples (seeded subset).
    #[serde(default)]
    pub sample_cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        task: SyntheticTaskSpec,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic { task, seed } => make_synthetic(task, *seed),
            DataSource::Idx {
                images,
                labels,
                num_classes,
            } => load_idx(images, labels, *num_classes),
            DataSource::Csv { path, num_classes } => load_csv(path, *num_classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Dirichlet concentration of the label split.
    pub alpha: f64,
    /// Re-draw the classification head before federating.
    #[serde(default)]
    pub reset_head: bool,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

/// Optional per-mode overrides; absent entries fall back to the defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeRates {
    pub full: Option<f64>,
    pub head: Option<f64>,
    pub bias: Option<f64>,
    pub adapter: Option<f64>,
    pub prompt: Option<f64>,
}

impl ModeRates {
    fn get(&self, mode: &TuningMode) -> Option<f64> {
        match mode {
            TuningMode::Full => self.full,
            TuningMode::Head => self.head,
            TuningMode::Bias => self.bias,
            TuningMode::Adapter { .. } => self.adapter,
            TuningMode::Prompt { .. } => self.prompt,
        }
    }
}

/// Default learning rate of `mode`, without and with differential privacy.
pub fn default_learning_rate(mode: &TuningMode, dp: bool) -> f64 {
    match (mode, dp) {
        (TuningMode::Full, false) => 1e-3,
        (TuningMode::Head, false) => 5e-3,
        (TuningMode::Bias, false) => 1e-2,
        (TuningMode::Adapter { .. }, false) => 5e-3,
        (TuningMode::Prompt { .. }, false) => 1e-2,
        (TuningMode::Full, true) => 1e-4,
        (TuningMode::Head, true) => 5e-4,
        (TuningMode::Bias, true) => 1e-3,
        (TuningMode::Adapter { .. }, true) => 5e-4,
        (TuningMode::Prompt { .. }, true) => 3e-4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSection {
    #[serde(default)]
    pub learning_rates: ModeRates,
    #[serde(default)]
    pub dp_learning_rates: ModeRates,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl Default for SgdSection {
    fn default() -> Self {
        Self {
            learning_rates: ModeRates::default(),
            dp_learning_rates: ModeRates::default(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch(),
        }
    }
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub data: DataSource,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, source: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let location = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "unknown location".into());
            Error::Parse {
                source_name: source.to_string(),
                location,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, &path.display().to_string()).map_err(|e| match e {
            Error::Parse {
                source_name,
                location,
                message,
            } => Error::config(format!("{source_name} at {location}: {message}")),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate().map_err(|e| Error::config(e.to_string()))?;
        count_params(&self.model, &self.mode).map_err(|e| Error::config(e.to_string()))?;
        if !(self.federation.alpha > 0.0) {
            return Err(Error::config("federation.alpha must be positive"));
        }
        if let Some(p) = &self.pretrain {
            if p.epochs == 0 || p.batch_size == 0 || !(p.learning_rate >= 0.0) {
                return Err(Error::config("pretrain needs epochs ≥ 1, batch_size ≥ 1 and learning_rate ≥ 0"));
            }
        }
        self.federation_config()?.validate()
    }

    /// SGD settings for the configured mode, honouring overrides.
    pub fn sgd_config(&self) -> SgdConfig {
        let rates = if self.dp.enabled {
            &self.sgd.dp_learning_rates
        } else {
            &self.sgd.learning_rates
        };
        SgdConfig {
            learning_rate: rates
                .get(&self.mode)
                .unwrap_or_else(|| default_learning_rate(&self.mode, self.dp.enabled)),
            weight_decay: self.sgd.weight_decay,
            batch_size: self.sgd.batch_size,
        }
    }

    pub fn federation_config(&self) -> Result<FederationConfig> {
        let f = &self.federation;
        Ok(FederationConfig {
            num_clients: f.num_clients,
            clients_per_round: f.clients_per_round,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            seed: self.seed,
            local: LocalTraining {
                sgd: self.sgd_config(),
                dp: self.dp,
                augment: self.augment,
            },
        })
    }

    /// SHA-256 over the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config is serializable");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3

[model]
family = "mlp"
input_dim = 4
hidden_dims = [8]
num_classes = 2

[mode]
kind = "bias"

[data.train]
source = "synthetic"
seed = 1
task = { num_classes = 2, samples_per_class = 10, generator = { kind = "blobs", dim = 4 } }

[data.eval]
source = "synthetic"
seed = 2
task = { num_classes = 2, samples_per_class = 5, generator = { kind = "blobs", dim = 4 } }

[federation]
num_clients = 4
clients_per_round = 2
rounds = 1
local_epochs = 1
alpha = 0.5
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL, "inline").unwrap();
        assert_eq!(c.mode, TuningMode::Bias);
        let sgd = c.sgd_config();
        assert_eq!(sgd.learning_rate, 1e-2);
        assert_eq!(sgd.weight_decay, 1e-4);
        assert_eq!(sgd.batch_size, 64);
        assert_eq!(c.data.train.load().unwrap().len(), 20);
    }

    #[test]
    fn dp_switches_rate_table() {
        let mut c = ExperimentConfig::from_toml_str(MINIMAL, "inline").unwrap();
        c.dp.enabled = true;
        assert_eq!(c.sgd_config().learning_rate, 1e-3);
        c.sgd.dp_learning_rates.bias = Some(0.5);
        assert_eq!(c.sgd_config().learning_rate, 0.5);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_toml_str(MINIMAL, "inline").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_values() {
        let bad = MINIMAL.replace("clients_per_round = 2", "clients_per_round = 9");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad, "x"), Err(Error::Config(_))));
        let bad = MINIMAL.replace("kind = \"bias\"", "kind = \"prompt\"");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad, "x"), Err(Error::Config(_))));
        let bad = MINIMAL.replace("seed = 3", "seed = 3\nunknown = 1");
        match ExperimentConfig::from_toml_str(&bad, "x") {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 3"),
            other => panic!("{other:?}"),
        }
    }
}
