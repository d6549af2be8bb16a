use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedpeft::experiment::{self, ExperimentConfig, TABLE_MISMATCH_EXIT};
use fedpeft::federation::RunOptions;
use fedpeft::peft::TuningMode;
use fedpeft::{Error, Result};

#[derive(Parser)]
#[command(name = "fedpeft", version, about = "Federated parameter-efficient fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, env = "FEDPEFT_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Centralized pretraining on the source task.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Federated fine-tuning.
    Federate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Pretrained checkpoint; overrides `federation.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the configured tuning mode (default hyperparameters).
        #[arg(long)]
        mode: Option<String>,
        /// Client worker threads; 1 is sequential, 0 uses every core.
        #[arg(long, env = "FEDPEFT_THREADS", default_value_t = 1)]
        threads: usize,
        /// Runs once per seed into `<out>/seed-<n>`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Accuracy of a checkpoint on the configured evaluation data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Parameter counts and per-round costs for ViT-B (exits 5 on mismatch).
    ReportTable1,
    /// Label-skew statistics of the configured client partition.
    PartitionStats {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<S: serde::Serialize>(value: &S) {
    emit(&(serde_json::to_string_pretty(value).expect("serializable") + "\n"));
}

fn federate(
    mut cfg: ExperimentConfig,
    out: &Path,
    checkpoint: Option<PathBuf>,
    mode: Option<String>,
    threads: usize,
    seeds: Vec<u64>,
) -> Result<()> {
    if let Some(m) = mode {
        cfg.mode = TuningMode::from_name(&m).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
    }
    let checkpoint = checkpoint.or_else(|| cfg.federation.checkpoint.clone());
    let opts = RunOptions { threads };
    let runs: Vec<(u64, PathBuf)> = if seeds.is_empty() {
        vec![(cfg.seed, out.to_path_buf())]
    } else {
        seeds.iter().map(|&s| (s, out.join(format!("seed-{s}")))).collect()
    };
    for (seed, dir) in runs {
        cfg.seed = seed;
        let summary = experiment::cmd_federate(&cfg, checkpoint.as_deref(), &dir, &opts)?;
        print_json(&serde_json::json!({
            "out_dir": summary.out_dir,
            "mode": summary.mode,
            "seed": seed,
            "config_hash": summary.config_hash,
            "transmitted_params": summary.transmitted_params,
            "initial_accuracy": summary.initial.accuracy,
            "final_accuracy": summary.final_accuracy(),
        }));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Pretrain { common, out } => {
            let cfg = load(&common)?;
            print_json(&experiment::cmd_pretrain(&cfg, &out)?);
        }
        Command::Federate {
            common,
            out,
            checkpoint,
            mode,
            threads,
            seeds,
        } => federate(load(&common)?, &out, checkpoint, mode, threads, seeds)?,
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            print_json(&experiment::cmd_eval(&cfg, &checkpoint)?);
        }
        Command::ReportTable1 => {
            let report = experiment::cmd_report_table1()?;
            emit(&report.render());
            let bad = report.mismatches();
            if !bad.is_empty() {
                for m in bad {
                    eprintln!("mismatch: {m}");
                }
                return Ok(TABLE_MISMATCH_EXIT);
            }
        }
        Command::PartitionStats { common, seeds } => {
            let mut cfg = load(&common)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            for s in seeds {
                cfg.seed = s;
                let stats = experiment::cmd_partition_stats(&cfg)?;
                print_json(&serde_json::json!({ "seed": s, "stats": stats }));
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(experiment::exit_code(&e) as u8)
        }
    }
}
