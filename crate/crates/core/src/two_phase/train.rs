use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::ToyDataset;
use super::model::{backward, forward_loss, full_mask, Batch, Classifier, TrainableMask};
use crate::error::{arg_err, Error, Result};
use crate::scalar::Real;

fn default_momentum() -> f64 {
    0.9
}

/// SGD-with-momentum settings for one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "full_mask")]
    pub trainable: TrainableMask,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return arg_err("learningRate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return arg_err("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return arg_err("batchSize must be >= 1");
        }
        Ok(())
    }
}

/// One line of the metric log. Epoch 0 is the evaluation before any update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Index of the largest logit; ties go to the lower class.
pub fn argmax<T: Real>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy over the samples listed in `indices`.
pub fn evaluate<T: Real, M: Classifier<T>>(
    model: &M,
    data: &ToyDataset<T>,
    indices: &[usize],
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let batch = Batch {
        images: indices.iter().map(|&i| &data.images[i]).collect(),
        labels: indices.iter().map(|&i| data.labels[i]).collect(),
    };
    let out = forward_loss(model, &batch)?;
    let correct = out
        .logits
        .iter()
        .zip(&batch.labels)
        .filter(|(z, &l)| argmax(z) == l)
        .count();
    Ok((out.loss.as_f64(), correct as f64 / indices.len() as f64))
}

fn metrics<T: Real, M: Classifier<T>>(model: &M, data: &ToyDataset<T>, epoch: usize) -> Result<EpochMetrics> {
    let (train_loss, _) = evaluate(model, data, &data.train)?;
    let (val_loss, val_acc) = evaluate(model, data, &data.val)?;
    if !train_loss.is_finite() || (!data.val.is_empty() && !val_loss.is_finite()) {
        return Err(Error::Divergence {
            epoch,
            detail: format!("non-finite loss (train {train_loss}, val {val_loss})"),
        });
    }
    Ok(EpochMetrics {
        epoch,
        train_loss,
        val_loss,
        val_acc,
    })
}

/// Trains `model` in place over the dataset's training split and returns the
/// metric log (`epochs + 1` lines).
pub fn train_phase<T: Real, M: Classifier<T>>(
    model: &mut M,
    data: &ToyDataset<T>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return arg_err("training split is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lr = T::from_f64(cfg.learning_rate);
    let mu = T::from_f64(cfg.momentum);
    let mut velocity: Vec<Vec<T>> = model
        .params()
        .iter()
        .map(|(_, p)| vec![T::zero(); p.len()])
        .collect();
    let mut log = vec![metrics(model, data, 0)?];
    let mut order = data.train.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch {
                images: chunk.iter().map(|&i| &data.images[i]).collect(),
                labels: chunk.iter().map(|&i| data.labels[i]).collect(),
            };
            let (loss, grads) = backward(model, &batch, &cfg.trainable)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite minibatch loss {}", loss.as_f64()),
                });
            }
            for ((id, param), vel) in model.params_mut().into_iter().zip(velocity.iter_mut()) {
                let Some(g) = grads.get(id) else { continue };
                for ((p, v), gi) in param.iter_mut().zip(vel.iter_mut()).zip(g) {
                    *v = mu * *v + *gi;
                    *p = *p - lr * *v;
                }
            }
        }
        log.push(metrics(model, data, epoch)?);
    }
    Ok(log)
}

/// Nearest-template baseline: each class template is the mean of its training
/// images; a sample is assigned the class whose template has the largest
/// correlation `⟨x, t⟩ − ½‖t‖²` (nearest template in Euclidean distance).
pub fn template_baseline_accuracy<T: Real>(data: &ToyDataset<T>) -> f64 {
    let n = data.num_classes();
    let len = data.images[0].as_slice().len();
    let mut templates = vec![vec![0.0f64; len]; n];
    let mut counts = vec![0usize; n];
    for &i in &data.train {
        let l = data.labels[i];
        counts[l] += 1;
        for (t, v) in templates[l].iter_mut().zip(data.images[i].as_slice()) {
            *t += v.as_f64();
        }
    }
    for (t, &c) in templates.iter_mut().zip(&counts) {
        t.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let norms: Vec<f64> = templates.iter().map(|t| t.iter().map(|v| v * v).sum()).collect();
    let correct = data
        .val
        .iter()
        .filter(|&&i| {
            let x = data.images[i].as_slice();
            let scores: Vec<f64> = templates
                .iter()
                .zip(&norms)
                .map(|(t, nt)| x.iter().zip(t).map(|(a, b)| a.as_f64() * b).sum::<f64>() - 0.5 * nt)
                .collect();
            argmax(&scores) == data.labels[i]
        })
        .count();
    correct as f64 / data.val.len().max(1) as f64
}
