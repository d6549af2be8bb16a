#![allow(dead_code)]

pub mod grad;

use fedpeft::data::{dirichlet_partition, partition_stats};
use fedpeft::federation::ClientUpdate;

/// Weighted mean in plain f64 with no shared code path: sum(n_i x_i) / sum(n_i).
pub fn weighted_mean_oracle(updates: &[ClientUpdate<f64>]) -> Vec<f64> {
    let dim = updates[0].theta.len();
    let total: f64 = updates.iter().map(|u| u.num_samples as f64).sum();
    (0..dim)
        .map(|j| updates.iter().map(|u| u.num_samples as f64 * u.theta[j]).sum::<f64>() / total)
        .collect()
}

pub fn balanced_labels(classes: usize, per_class: usize) -> Vec<usize> {
    (0..classes * per_class).map(|i| i % classes).collect()
}

pub const ALPHAS: [f64; 5] = [0.1, 0.5, 1.0, 10.0, 1000.0];

/// Mean pairwise total-variation distance between client label
/// distributions, averaged over `seeds` partitions, one value per alpha.
pub fn mean_tv_by_alpha(labels: &[usize], classes: usize, clients: usize, seeds: u64) -> Vec<f64> {
    ALPHAS
        .iter()
        .map(|&alpha| {
            (0..seeds)
                .map(|s| {
                    let p = dirichlet_partition(labels, clients, alpha, s).unwrap();
                    partition_stats(&p, labels, classes).mean_pairwise_tv
                })
                .sum::<f64>()
                / seeds as f64
        })
        .collect()
}

/// Per-class counts of the whole label set and of each shard, summed.
pub fn conserved(labels: &[usize], owner: &[usize], classes: usize, clients: usize) -> bool {
    let mut want = vec![0usize; classes];
    let mut got = vec![vec![0usize; classes]; clients];
    for (&y, &c) in labels.iter().zip(owner) {
        want[y] += 1;
        if c >= clients {
            return false;
        }
        got[c][y] += 1;
    }
    owner.len() == labels.len() && (0..classes).all(|k| got.iter().map(|g| g[k]).sum::<usize>() == want[k])
}
