use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{save_checkpoint, CheckpointError, Example, Model, ModelError};
use crate::autodiff::Mat;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss diverged at epoch {epoch}, step {step}; parameters restored to the last good epoch")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: i32,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Mat<T>], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.raw_dim())).collect::<Vec<_>>();
        Adam {
            lr: T::from_f64(lr).unwrap(),
            beta1: T::from_f64(0.9).unwrap(),
            beta2: T::from_f64(0.999).unwrap(),
            eps: T::from_f64(1e-8).unwrap(),
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Mat<T>], grads: &[Mat<T>]) {
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (one - self.beta1) * g;
                *v = self.beta2 * *v + (one - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-snapshot loss over the epoch.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Per-step mean batch loss.
    pub losses: Vec<f64>,
    /// Per-step global gradient norm before clipping.
    pub grad_norms: Vec<f64>,
}

/// Deterministic split of `n` items: shuffled with `seed`, the first
/// `fraction` go to training.
pub fn split_dataset(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64) * fraction).round() as usize;
    let test = idx.split_off(cut.min(n));
    (idx, test)
}

/// Fraction of snapshots whose every predicted address matches its label
/// bit for bit, in order. Snapshots without references are not counted.
pub fn prefetch_accuracy<T: Scalar>(model: &Model<T>, data: &[Example]) -> Result<f64, ModelError> {
    let mut total = 0usize;
    let mut hit = 0usize;
    for ex in data {
        if ex.input.d == 0 {
            continue;
        }
        total += 1;
        if model.predict(&ex.input)? == ex.labels {
            hit += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Minibatch Adam over `train_set` for `model.config.epochs` epochs. The
/// shuffle order is drawn from the config seed. When `checkpoint` is given
/// parameters are written there after every epoch.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &[Example],
    test_set: &[Example],
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::Empty);
    }
    let cfg = model.config.clone();
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a11);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    let mut last_good = model.params.clone();
    let inv_batch = |n: usize| T::one() / T::from_usize(n).unwrap();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut sum: Option<Vec<Mat<T>>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train_set[i];
                let (loss, grads) = model.loss_and_grad(&ex.input, &ex.labels)?;
                batch_loss += loss.to_f64().unwrap();
                match &mut sum {
                    Some(s) => s.iter_mut().zip(&grads).for_each(|(a, g)| *a += g),
                    None => sum = Some(grads),
                }
            }
            let k = inv_batch(batch.len());
            let mut grads: Vec<Mat<T>> = sum.unwrap().into_iter().map(|g| g * k).collect();
            let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
            report.grad_norms.push(norm);
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let s = T::from_f64(cfg.grad_clip / norm).unwrap();
                grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
            }
            adam.step(&mut model.params, &grads);
            if !batch_loss.is_finite() || !model.is_finite() {
                model.params = last_good;
                return Err(TrainError::Diverged { epoch, step });
            }
            epoch_loss += batch_loss;
            report.losses.push(batch_loss / batch.len() as f64);
        }
        last_good = model.params.clone();
        if let Some(p) = checkpoint {
            save_checkpoint(model, p)?;
        }
        let stats = EpochStats {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            train_accuracy: prefetch_accuracy(model, train_set)?,
            test_accuracy: if test_set.is_empty() {
                0.0
            } else {
                prefetch_accuracy(model, test_set)?
            },
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}
