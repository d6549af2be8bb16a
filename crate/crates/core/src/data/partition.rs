use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;

use crate::error::{Error, Result};

/// Owner client for every sample of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionAssignment {
    owner: Vec<usize>,
    num_clients: usize,
    alpha: Option<f64>,
    seed: Option<u64>,
}

impl PartitionAssignment {
    /// An explicit assignment, e.g. hand-built shards.
    pub fn from_owner(owner: Vec<usize>, num_clients: usize) -> Result<Self> {
        if num_clients == 0 {
            return Err(Error::input("number of clients must be at least 1"));
        }
        if let Some(&c) = owner.iter().find(|&&c| c >= num_clients) {
            return Err(Error::input(format!("owner {c} out of range for {num_clients} clients")));
        }
        Ok(Self {
            owner,
            num_clients,
            alpha: None,
            seed: None,
        })
    }

    pub fn owner(&self) -> &[usize] {
        &self.owner
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    /// Dirichlet concentration, for sampled partitions.
    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Sample indices per client, each in ascending order.
    pub fn shards(&self) -> Vec<Vec<usize>> {
        let mut shards = vec![Vec::new(); self.num_clients];
        for (i, &c) in self.owner.iter().enumerate() {
            shards[c].push(i);
        }
        shards
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clients];
        for &c in &self.owner {
            sizes[c] += 1;
        }
        sizes
    }

    /// `counts[client][class]`.
    pub fn class_counts(&self, labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; num_classes]; self.num_clients];
        for (&c, &l) in self.owner.iter().zip(labels) {
            counts[c][l] += 1;
        }
        counts
    }
}

/// Splits every class independently across `num_clients` clients with
/// proportions drawn from a symmetric Dirichlet(`alpha`).
///
/// Proportions become integer counts by largest-remainder rounding, so each
/// class is conserved exactly.
pub fn dirichlet_partition(labels: &[usize], num_clients: usize, alpha: f64, seed: u64) -> Result<PartitionAssignment> {
    if num_clients == 0 {
        return Err(Error::input("number of clients must be at least 1"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::input(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::input(e.to_string()))?;
    let mut owner = vec![0usize; labels.len()];
    for mut members in by_class {
        let props = if num_clients == 1 {
            vec![1.0]
        } else {
            let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if total > 0.0 {
                draws.iter().map(|g| g / total).collect()
            } else {
                // every draw underflowed; the mass goes to the largest (first) one
                let mut p = vec![0.0; num_clients];
                p[0] = 1.0;
                p
            }
        };
        let counts = largest_remainder(&props, members.len());
        members.shuffle(&mut rng);
        let mut it = members.into_iter();
        for (client, &n) in counts.iter().enumerate() {
            for idx in it.by_ref().take(n) {
                owner[idx] = client;
            }
        }
    }
    Ok(PartitionAssignment {
        owner,
        num_clients,
        alpha: Some(alpha),
        seed: Some(seed),
    })
}

/// Integer apportionment of `total` by `props`; ties go to the lower index.
fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionStats {
    pub shard_sizes: Vec<usize>,
    /// Mean Shannon entropy (nats) of the per-client label distribution,
    /// over clients holding at least one sample.
    pub mean_label_entropy: f64,
    /// Mean pairwise total-variation distance between client label
    /// distributions (non-empty clients only).
    pub mean_pairwise_tv: f64,
    pub empty_clients: usize,
}

pub fn partition_stats(p: &PartitionAssignment, labels: &[usize], num_classes: usize) -> PartitionStats {
    let counts = p.class_counts(labels, num_classes);
    let dists: Vec<Vec<f64>> = counts
        .iter()
        .filter(|c| c.iter().sum::<usize>() > 0)
        .map(|c| {
            let n = c.iter().sum::<usize>() as f64;
            c.iter().map(|&k| k as f64 / n).collect()
        })
        .collect();
    let entropy = |d: &Vec<f64>| -> f64 { d.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum() };
    let mean_label_entropy = if dists.is_empty() {
        0.0
    } else {
        dists.iter().map(entropy).sum::<f64>() / dists.len() as f64
    };
    let mut tv_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            tv_sum += 0.5 * dists[i].iter().zip(&dists[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
            pairs += 1;
        }
    }
    PartitionStats {
        shard_sizes: p.shard_sizes(),
        mean_label_entropy,
        mean_pairwise_tv: if pairs == 0 { 0.0 } else { tv_sum / pairs as f64 },
        empty_clients: counts.iter().filter(|c| c.iter().all(|&k| k == 0)).count(),
    }
}
