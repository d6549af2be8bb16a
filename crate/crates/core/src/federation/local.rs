//! Local mini-batch SGD shared by client updates and centralized pretraining.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::GlobalModel;
use crate::privacy::{clip_gradient, dp_step, DpConfig};
use crate::tensor::{sgd_step, Real, SgdConfig, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub sgd: SgdConfig,
    pub dp: DpConfig,
    pub augment: AugmentConfig,
}

/// Loss summary of a stretch of local training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub loss_sum: f64,
    pub batches: usize,
    pub samples: usize,
}

impl EpochStats {
    pub fn mean_loss(&self) -> f64 {
        if self.batches == 0 {
            f64::NAN
        } else {
            self.loss_sum / self.batches as f64
        }
    }

    pub fn merge(&mut self, other: EpochStats) {
        self.loss_sum += other.loss_sum;
        self.batches += other.batches;
        self.samples += other.samples;
    }
}

fn batch_input<T: Real, R: Rng + ?Sized>(
    model: &GlobalModel<T>,
    data: &Dataset,
    batch: &[usize],
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let labels: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
    let input = if aug.horizontal_flip > 0.0 {
        let owned: Vec<Vec<f32>> = batch
            .iter()
            .map(|&i| {
                let mut s = data.sample(i).to_vec();
                augment(&mut s, data.feature_shape(), aug, rng);
                s
            })
            .collect();
        let refs: Vec<&[f32]> = owned.iter().map(|s| s.as_slice()).collect();
        model.prepare_input(&refs)?
    } else {
        let refs: Vec<&[f32]> = batch.iter().map(|&i| data.sample(i)).collect();
        model.prepare_input(&refs)?
    };
    Ok((input, labels))
}

/// Gradients of the batch mean loss. With per-sample DP clipping each
/// sample's gradient is clipped before averaging.
fn batch_gradients<T: Real, R: Rng + ?Sized>(
    model: &GlobalModel<T>,
    data: &Dataset,
    batch: &[usize],
    cfg: &LocalTraining,
    rng: &mut R,
) -> Result<(f64, Vec<Option<Vec<T>>>)> {
    let (input, labels) = batch_input(model, data, batch, &cfg.augment, rng)?;
    if !(cfg.dp.enabled && cfg.dp.per_sample) || batch.len() == 1 {
        let (loss, mut grads) = model.loss_and_gradients(&input, &labels)?;
        if cfg.dp.enabled && cfg.dp.per_sample {
            clip_gradient(&mut grads, cfg.dp.clip_norm);
        }
        return Ok((loss.as_f64(), grads));
    }
    let width = input.len() / batch.len();
    let mut per_shape = input.shape().to_vec();
    per_shape[0] = 1;
    let mut loss_sum = 0.0;
    let mut acc: Option<Vec<Option<Vec<T>>>> = None;
    for (k, &label) in labels.iter().enumerate() {
        let one = Tensor::new(per_shape.clone(), input.data()[k * width..(k + 1) * width].to_vec())?;
        let (loss, mut grads) = model.loss_and_gradients(&one, &[label])?;
        clip_gradient(&mut grads, cfg.dp.clip_norm);
        loss_sum += loss.as_f64();
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(a) => {
                for (dst, src) in a.iter_mut().zip(grads) {
                    if let (Some(d), Some(s)) = (dst.as_mut(), src) {
                        d.iter_mut().zip(s).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }
    let inv = T::c(1.0 / batch.len() as f64);
    let mut grads = acc.expect("batch is non-empty");
    for v in grads.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
        *v *= inv;
    }
    Ok((loss_sum / batch.len() as f64, grads))
}

/// One SGD step on `batch`; returns the batch loss before the step.
pub fn train_step<T: Real, R: Rng + ?Sized>(
    model: &mut GlobalModel<T>,
    data: &Dataset,
    batch: &[usize],
    cfg: &LocalTraining,
    rng: &mut R,
) -> Result<f64> {
    let (loss, mut grads) = batch_gradients(model, data, batch, cfg, rng)?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite training loss {loss}")));
    }
    dp_step(&mut grads, &cfg.dp, rng)?;
    let mask = model.registry().trainable_mask();
    for (w, g) in model.weights_mut().iter_mut().zip(grads) {
        if let Some(g) = g {
            w.set_grad(g)?;
        }
    }
    sgd_step(model.weights_mut(), &mask, &cfg.sgd)?;
    Ok(loss)
}

/// One pass over `indices` in a freshly shuffled order.
pub fn train_epoch<T: Real, R: Rng + ?Sized>(
    model: &mut GlobalModel<T>,
    data: &Dataset,
    indices: &[usize],
    cfg: &LocalTraining,
    rng: &mut R,
) -> Result<EpochStats> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut stats = EpochStats::default();
    for batch in order.chunks(cfg.sgd.batch_size.max(1)) {
        stats.loss_sum += train_step(model, data, batch, cfg, rng)?;
        stats.batches += 1;
        stats.samples += batch.len();
    }
    Ok(stats)
}
