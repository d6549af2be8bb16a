//! Config-driven pipelines behind the command-line tool.
//!
//! Every artifact written by a run carries the SHA-256 of the effective
//! configuration. `metrics.jsonl` holds no wall-clock data, so two runs of
//! the same configuration produce identical logs; timestamps live in
//! `run.json`.

mod config;
mod report;

pub use config::{
    default_learning_rate, DataConfig, DataSource, ExperimentConfig, FederationSection, ModeRates, PretrainConfig,
    SgdSection, CONFIG_VERSION,
};
pub use report::{table1_report, Table1Report, Table1Row, FIGURE1_EXPECTED, TABLE1_CLIENTS, TABLE1_EXPECTED};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{dirichlet_partition, partition_stats, AugmentConfig, Dataset, PartitionStats};
use crate::error::{Error, Result};
use crate::federation::{evaluate, run_training, stream_seed, train_epoch, EvalMetrics, LocalTraining, EVAL_BATCH_SIZE, RoundRecord, RunOptions};
use crate::ledger::CommLedger;
use crate::model::checkpoint::{self, CheckpointMeta};
use crate::model::{build_model, GlobalModel};
use crate::peft::apply_mode;
use crate::privacy::DpConfig;
use crate::tensor::{Precision, Real, SgdConfig};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const RUN_FILE: &str = "run.json";
pub const PRETRAINED_CHECKPOINT: &str = "pretrained.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const LOCK_FILE: &str = ".lock";

const PRETRAIN_STREAM: u64 = u64::MAX - 1;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Input(_) | Error::Parse { .. } | Error::Io(_) => 3,
        Error::Divergence(_) => 4,
        _ => 1,
    }
}

/// Exit code of a cost-table report with mismatching cells.
pub const TABLE_MISMATCH_EXIT: i32 = 5;

/// Held while a run writes into an output directory.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(format!(
                "{} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn json_line<S: Serialize>(w: &mut impl Write, value: &S) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn check_classes(cfg: &ExperimentConfig, data: &Dataset, what: &str) -> Result<()> {
    let want = cfg.model.num_classes();
    if data.num_classes() > want {
        return Err(Error::input(format!(
            "{what} data has {} classes, the model predicts {want}",
            data.num_classes()
        )));
    }
    let per_sample: usize = cfg.model.input_shape().iter().product();
    if data.feature_len() != per_sample {
        return Err(Error::input(format!(
            "{what} samples have {} features, the model expects {per_sample}",
            data.feature_len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub config_hash: String,
    pub final_train_loss: f64,
    pub train_accuracy: f64,
}

/// Centralized training of the full model on the pretraining source task.
/// Writes `pretrained.ckpt` into `out`.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainSummary> {
    match cfg.precision {
        Precision::F32 => pretrain::<f32>(cfg, out),
        Precision::F64 => pretrain::<f64>(cfg, out),
    }
}

fn pretrain<T: Real>(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainSummary> {
    let p = cfg
        .pretrain
        .as_ref()
        .ok_or_else(|| Error::config("the configuration has no [pretrain] section"))?;
    let _lock = DirLock::acquire(out)?;
    let data = p.data.load()?;
    check_classes(cfg, &data, "pretraining")?;
    let mut model = build_model::<T>(&cfg.model, cfg.seed)?;
    let local = LocalTraining {
        sgd: SgdConfig {
            learning_rate: p.learning_rate,
            weight_decay: p.weight_decay,
            batch_size: p.batch_size,
        },
        dp: DpConfig::default(),
        augment: AugmentConfig::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0, PRETRAIN_STREAM));
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut last_loss = f64::NAN;
    for epoch in 0..p.epochs {
        let stats = train_epoch(&mut model, &data, &idx, &local, &mut rng)?;
        last_loss = stats.mean_loss();
        log::info!("pretrain epoch {epoch}: loss {last_loss:.4}");
    }
    let train = evaluate(&model, &data, EVAL_BATCH_SIZE)?;
    let meta = CheckpointMeta {
        pretrained: true,
        config_hash: Some(cfg.hash()),
    };
    let path = out.join(PRETRAINED_CHECKPOINT);
    checkpoint::save(&model, &meta, &path)?;
    Ok(PretrainSummary {
        checkpoint: path,
        checkpoint_hash: checkpoint::content_hash(&model, &meta)?,
        config_hash: cfg.hash(),
        final_train_loss: last_loss,
        train_accuracy: train.accuracy,
    })
}

/// First line of `metrics.jsonl`, then one `round` line per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MetricsLine {
    Meta {
        config_hash: String,
        code_version: String,
        mode: String,
        seed: u64,
        total_params: u64,
        transmitted_params: u64,
        initial_accuracy: f64,
        initial_loss: f64,
    },
    Round(RoundRecord),
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                source_name: path.display().to_string(),
                location: format!("line {}", i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederateSummary {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub mode: String,
    pub transmitted_params: u64,
    pub initial: EvalMetrics,
    pub records: Vec<RoundRecord>,
}

impl FederateSummary {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(self.initial.accuracy, |r| r.server_accuracy)
    }
}

#[derive(Debug, Serialize)]
struct RunInfo<'a> {
    config_hash: &'a str,
    code_version: &'a str,
    mode: &'a str,
    seed: u64,
    threads: usize,
    checkpoint: Option<String>,
    started_unix: u64,
    finished_unix: u64,
    rounds_completed: usize,
    status: &'a str,
}

/// Federated fine-tuning starting from `checkpoint` (or a fresh model when
/// `None`). Writes the metrics log, ledger, final checkpoint and run info
/// into `out`.
pub fn cmd_federate(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path, opts: &RunOptions) -> Result<FederateSummary> {
    match cfg.precision {
        Precision::F32 => federate::<f32>(cfg, checkpoint, out, opts),
        Precision::F64 => federate::<f64>(cfg, checkpoint, out, opts),
    }
}

fn load_base<T: Real>(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<GlobalModel<T>> {
    match checkpoint {
        Some(path) => {
            let (model, _) = checkpoint::load::<T>(path)?;
            if model.spec() != &cfg.model {
                return Err(Error::input(format!(
                    "checkpoint {} was built for a different model spec",
                    path.display()
                )));
            }
            Ok(model)
        }
        None => {
            log::warn!("no checkpoint given; starting from a randomly initialised model");
            build_model(&cfg.model, cfg.seed)
        }
    }
}

fn federate<T: Real>(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path, opts: &RunOptions) -> Result<FederateSummary> {
    let started = unix_time();
    let _lock = DirLock::acquire(out)?;
    let config_hash = cfg.hash();
    let fed = cfg.federation_config()?;

    let train = cfg.data.train.load()?;
    check_classes(cfg, &train, "training")?;
    let train = match cfg.data.sample_cap {
        Some(k) => train.cap(k, cfg.seed),
        None => train,
    };
    let eval_set = cfg.data.eval.load()?;
    check_classes(cfg, &eval_set, "evaluation")?;
    let partition = dirichlet_partition(train.labels(), fed.num_clients, cfg.federation.alpha, cfg.seed)?;

    let mut model = load_base::<T>(cfg, checkpoint)?;
    if cfg.federation.reset_head {
        model.reset_head(cfg.seed);
    }
    let mut model = apply_mode(model, cfg.mode, cfg.seed)?;
    let initial = evaluate(&model, &eval_set, EVAL_BATCH_SIZE)?;
    let mode = cfg.mode.name().to_string();
    let transmitted = model.registry().transmitted_count();

    let mut metrics = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    json_line(
        &mut metrics,
        &MetricsLine::Meta {
            config_hash: config_hash.clone(),
            code_version: CODE_VERSION.into(),
            mode: mode.clone(),
            seed: cfg.seed,
            total_params: model.registry().total_count(),
            transmitted_params: transmitted,
            initial_accuracy: initial.accuracy,
            initial_loss: initial.loss,
        },
    )?;
    let ledger_path = out.join(LEDGER_FILE);
    let mut ledger = CommLedger::new();
    ledger.save_csv(&ledger_path)?;

    let result = run_training(&mut model, &train, &partition, &fed, &eval_set, opts, |rec| {
        json_line(&mut metrics, &MetricsLine::Round(rec.clone()))?;
        ledger.record(rec.round, &mode, rec.param_count, rec.sampled.len() as u64, rec.server_accuracy);
        ledger.save_csv(&ledger_path)
    });

    let records_done = ledger.entries().len();
    let info = |status: &str| -> Result<()> {
        let info = RunInfo {
            config_hash: &config_hash,
            code_version: CODE_VERSION,
            mode: &mode,
            seed: cfg.seed,
            threads: opts.threads,
            checkpoint: checkpoint.map(|p| p.display().to_string()),
            started_unix: started,
            finished_unix: unix_time(),
            rounds_completed: records_done,
            status,
        };
        let text = serde_json::to_string_pretty(&info).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        std::fs::write(out.join(RUN_FILE), text + "\n")?;
        Ok(())
    };
    let records = match result {
        Ok(r) => r,
        Err(e) => {
            info("failed")?;
            return Err(e);
        }
    };
    let meta = CheckpointMeta {
        pretrained: false,
        config_hash: Some(config_hash.clone()),
    };
    checkpoint::save(&model, &meta, &out.join(FINAL_CHECKPOINT))?;
    info("completed")?;
    Ok(FederateSummary {
        out_dir: out.to_path_buf(),
        config_hash,
        mode,
        transmitted_params: transmitted,
        initial,
        records,
    })
}

/// Accuracy and loss of a checkpoint on the configured evaluation data.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalMetrics> {
    let data = cfg.data.eval.load()?;
    match cfg.precision {
        Precision::F32 => eval_checkpoint::<f32>(cfg, checkpoint, &data),
        Precision::F64 => eval_checkpoint::<f64>(cfg, checkpoint, &data),
    }
}

fn eval_checkpoint<T: Real>(cfg: &ExperimentConfig, path: &Path, data: &Dataset) -> Result<EvalMetrics> {
    let (model, _) = checkpoint::load::<T>(path)?;
    if model.spec() != &cfg.model {
        return Err(Error::input(format!(
            "checkpoint {} does not match the configured model",
            path.display()
        )));
    }
    check_classes(cfg, data, "evaluation")?;
    evaluate(&model, data, EVAL_BATCH_SIZE)
}

/// Label-skew statistics of the configured partition.
pub fn cmd_partition_stats(cfg: &ExperimentConfig) -> Result<PartitionStats> {
    let train = cfg.data.train.load()?;
    let train = match cfg.data.sample_cap {
        Some(k) => train.cap(k, cfg.seed),
        None => train,
    };
    let p = dirichlet_partition(train.labels(), cfg.federation.num_clients, cfg.federation.alpha, cfg.seed)?;
    Ok(partition_stats(&p, train.labels(), train.num_classes()))
}

pub fn cmd_report_table1() -> Result<Table1Report> {
    table1_report()
}
