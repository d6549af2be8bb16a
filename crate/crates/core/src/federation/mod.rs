//! Round orchestration: sample, broadcast, train locally, aggregate, evaluate.

mod aggregate;
mod local;

pub use aggregate::{aggregate, ClientUpdate};
pub use local::{train_epoch, train_step, EpochStats, LocalTraining};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PartitionAssignment};
use crate::error::{Error, Result};
use crate::ledger::round_cost;
use crate::model::GlobalModel;
use crate::tensor::{Graph, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    /// `N`
    pub num_clients: usize,
    /// `M`
    pub clients_per_round: usize,
    /// `T`
    pub rounds: usize,
    /// `E`
    pub local_epochs: usize,
    pub seed: u64,
    pub local: LocalTraining,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::config(format!(
                "clients per round must lie in [1, {}], got {}",
                self.num_clients, self.clients_per_round
            )));
        }
        if self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::config("rounds and local epochs must be at least 1"));
        }
        self.local.sgd.validate()?;
        if self.local.dp.enabled {
            self.local.dp.validate()?;
        }
        Ok(())
    }
}

/// Execution knobs that must not influence results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads for client training; 1 runs clients in sequence, 0
    /// lets the pool pick.
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { threads: 1 }
    }
}

/// One communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Sampled client ids, ascending.
    pub sampled: Vec<usize>,
    /// `|D_m|` for each sampled client.
    pub sample_counts: Vec<usize>,
    /// `|P|`
    pub param_count: u64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    /// Sample-weighted mean of the sampled clients' minibatch losses.
    pub train_loss: f64,
    pub server_accuracy: f64,
    pub server_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the random stream owned by `client` in `round`.
pub fn stream_seed(seed: u64, round: u64, client: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ round) ^ client)
}

const SERVER_STREAM: u64 = u64::MAX;

/// Batch size of server-side evaluation. Loss sums depend on batching, so
/// every caller uses the same value.
pub const EVAL_BATCH_SIZE: usize = 100;

/// Uniform sample of `m` distinct ids from `eligible`, returned ascending.
pub fn sample_clients<R: rand::Rng + ?Sized>(eligible: &[usize], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m > eligible.len() {
        return Err(Error::config(format!(
            "cannot sample {m} clients from {} eligible ones",
            eligible.len()
        )));
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, eligible.len(), m)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Local training of one client starting from the broadcast `theta`.
/// Returns `None` for an empty shard.
pub fn client_update<T: Real>(
    global: &GlobalModel<T>,
    theta: &[T],
    data: &Dataset,
    shard: &[usize],
    client_id: usize,
    local_epochs: usize,
    cfg: &LocalTraining,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(ClientUpdate<T>, EpochStats)>> {
    if shard.is_empty() {
        log::warn!("client {client_id} has no samples and is skipped");
        return Ok(None);
    }
    let mut local = global.clone();
    local.load_transmitted(theta)?;
    let mut stats = EpochStats::default();
    for _ in 0..local_epochs {
        stats.merge(train_epoch(&mut local, data, shard, cfg, rng)?);
    }
    Ok(Some((
        ClientUpdate {
            client_id,
            theta: local.snapshot_transmitted(),
            num_samples: shard.len(),
        },
        stats,
    )))
}

/// Accuracy and mean cross-entropy over `data`.
pub fn evaluate<T: Real>(model: &GlobalModel<T>, data: &Dataset, batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for batch in idx.chunks(batch_size.max(1)) {
        let refs: Vec<&[f32]> = batch.iter().map(|&i| data.sample(i)).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
        let input = model.prepare_input(&refs)?;
        let mut g = Graph::inference();
        let logits = model.forward(&mut g, &input)?.logits;
        let loss = g.cross_entropy(logits, &labels)?;
        loss_sum += g.value(loss).data()[0].as_f64() * batch.len() as f64;
        let values = g.value(logits);
        let classes = values.shape()[1];
        for (row, &label) in values.data().chunks(classes).zip(&labels) {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
    })
}

struct Executor {
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    fn new(threads: usize) -> Result<Self> {
        #[cfg(feature = "parallel")]
        {
            let pool = if threads == 1 {
                None
            } else {
                Some(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(threads)
                        .build()
                        .map_err(|e| Error::config(format!("cannot start thread pool: {e}")))?,
                )
            };
            Ok(Self { pool })
        }
        #[cfg(not(feature = "parallel"))]
        {
            if threads > 1 {
                log::warn!("built without the `parallel` feature; running clients sequentially");
            }
            Ok(Self {})
        }
    }

    /// `f` applied to every item; output order follows `items`.
    fn map<I: Sync, R: Send>(&self, items: &[I], f: impl Fn(&I) -> R + Sync + Send) -> Vec<R> {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }
}

/// Runs `cfg.rounds` rounds on `global`, which must already carry its tuning
/// mode. `observer` sees each record as soon as the round completes; an
/// error from it aborts the run.
pub fn run_training<T: Real>(
    global: &mut GlobalModel<T>,
    data: &Dataset,
    partition: &PartitionAssignment,
    cfg: &FederationConfig,
    eval_set: &Dataset,
    opts: &RunOptions,
    mut observer: impl FnMut(&RoundRecord) -> Result<()>,
) -> Result<Vec<RoundRecord>> {
    cfg.validate()?;
    if partition.owner().len() != data.len() {
        return Err(Error::contract("partition does not cover the training set"));
    }
    if partition.num_clients() != cfg.num_clients {
        return Err(Error::config(format!(
            "partition has {} clients, configuration says {}",
            partition.num_clients(),
            cfg.num_clients
        )));
    }
    if eval_set.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    let shards = partition.shards();
    let eligible: Vec<usize> = (0..cfg.num_clients).filter(|&c| !shards[c].is_empty()).collect();
    if eligible.len() < cfg.num_clients {
        log::warn!(
            "{} of {} clients hold no samples and are never sampled",
            cfg.num_clients - eligible.len(),
            cfg.num_clients
        );
    }
    let exec = Executor::new(opts.threads)?;
    let param_count = global.registry().transmitted_count();
    let mut history = Vec::with_capacity(cfg.rounds);

    for t in 0..cfg.rounds {
        let mut server_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, t as u64, SERVER_STREAM));
        let sampled = sample_clients(&eligible, cfg.clients_per_round, &mut server_rng)?;
        let theta = global.snapshot_transmitted();

        let snapshot: &GlobalModel<T> = global;
        let results = exec.map(&sampled, |&id| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, t as u64, id as u64));
            client_update(snapshot, &theta, data, &shards[id], id, cfg.local_epochs, &cfg.local, &mut rng)
        });

        let mut updates = Vec::with_capacity(results.len());
        let mut loss_weighted = 0.0;
        for r in results {
            let (u, stats) = r?.expect("only non-empty clients are sampled");
            loss_weighted += stats.mean_loss() * u.num_samples as f64;
            updates.push(u);
        }
        let sample_counts: Vec<usize> = updates.iter().map(|u| u.num_samples).collect();
        let total: usize = sample_counts.iter().sum();
        let new_theta = aggregate(&updates)?;
        global.load_transmitted(&new_theta)?;

        let eval = evaluate(global, eval_set, EVAL_BATCH_SIZE)?;
        let bytes = round_cost(param_count, sampled.len() as u64);
        let record = RoundRecord {
            round: t,
            sampled,
            sample_counts,
            param_count,
            upload_bytes: bytes,
            download_bytes: bytes,
            train_loss: loss_weighted / total as f64,
            server_accuracy: eval.accuracy,
            server_loss: eval.loss,
        };
        log::info!(
            "round {t}: train loss {:.4}, server accuracy {:.4}",
            record.train_loss,
            record.server_accuracy
        );
        observer(&record)?;
        history.push(record);
    }
    Ok(history)
}
