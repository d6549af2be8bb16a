use crate::error::{Error, Result};
use crate::tensor::Real;

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate<T> {
    pub client_id: usize,
    pub theta: Vec<T>,
    /// `|D_m|`, the aggregation weight.
    pub num_samples: usize,
}

/// Size-weighted FedAvg over the transmitted vectors.
///
/// Terms are summed in ascending client-id order, so the result does not
/// depend on the order of `updates`. Each coordinate is clamped to the
/// range spanned by the updates, which makes averaging identical vectors
/// exact.
pub fn aggregate<T: Real>(updates: &[ClientUpdate<T>]) -> Result<Vec<T>> {
    let Some(first) = updates.first() else {
        return Err(Error::contract("aggregation needs at least one update"));
    };
    let len = first.theta.len();
    if let Some(u) = updates.iter().find(|u| u.theta.len() != len) {
        return Err(Error::contract(format!(
            "client {} sent {} values, expected {len}",
            u.client_id,
            u.theta.len()
        )));
    }
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::contract("aggregation weights sum to zero"));
    }
    let mut order: Vec<&ClientUpdate<T>> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    if order.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::contract("duplicate client id in aggregation"));
    }

    let total = T::c(total as f64);
    let weights: Vec<T> = order.iter().map(|u| T::c(u.num_samples as f64) / total).collect();
    let mut out = vec![T::zero(); len];
    for (u, &w) in order.iter().zip(&weights) {
        for (o, &x) in out.iter_mut().zip(&u.theta) {
            *o += w * x;
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        let (mut lo, mut hi) = (order[0].theta[j], order[0].theta[j]);
        for u in &order[1..] {
            lo = lo.min(u.theta[j]);
            hi = hi.max(u.theta[j]);
        }
        *o = o.max(lo).min(hi);
    }
    Ok(out)
}
