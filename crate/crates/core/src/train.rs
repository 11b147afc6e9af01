//! Deterministic mini-batch training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Classifier, Trainable};
use crate::numerics::Tensor;
use crate::surrogate::SurrogateSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { lr: f32, momentum: f32 },
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
}

impl Optimizer {
    pub fn sgd(lr: f32, momentum: f32) -> Self {
        Optimizer::Sgd { lr, momentum }
    }

    pub fn adam(lr: f32) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Sgd { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Samples per data-parallel shard. Results do not depend on the
    /// number of worker threads, only on this value.
    pub shard: usize,
    /// Backward kernel for spiking models.
    pub surrogate: Option<SurrogateSpec>,
}

impl TrainConfig {
    pub fn new(optimizer: Optimizer, epochs: usize, seed: u64) -> Self {
        Self {
            optimizer,
            epochs,
            batch_size: 64,
            seed,
            shard: 16,
            surrogate: None,
        }
    }

    fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.shard == 0 {
            return Err(Error::Config("batch_size and shard must be >= 1".into()));
        }
        if let Some(s) = &self.surrogate {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Running accuracy over the epoch's mini-batches.
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

enum OptState {
    Sgd { velocity: Vec<Tensor> },
    Adam { m: Vec<Tensor>, v: Vec<Tensor>, step: i32 },
}

impl OptState {
    fn new(opt: &Optimizer, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        match opt {
            Optimizer::Sgd { .. } => OptState::Sgd { velocity: zeros() },
            Optimizer::Adam { .. } => OptState::Adam {
                m: zeros(),
                v: zeros(),
                step: 0,
            },
        }
    }

    fn apply(&mut self, opt: &Optimizer, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        match (self, *opt) {
            (OptState::Sgd { velocity }, Optimizer::Sgd { lr, momentum }) => {
                for ((p, g), vel) in params.into_iter().zip(grads).zip(velocity) {
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                        *vi = momentum * *vi + gi;
                        *w -= lr * *vi;
                    }
                }
            }
            (OptState::Adam { m, v, step }, Optimizer::Adam { lr, beta1, beta2, eps }) => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for (((p, g), mt), vt) in params.into_iter().zip(grads).zip(m).zip(v) {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(mt.data_mut()).zip(vt.data_mut());
                    for (((w, &gi), mi), vi) in it {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
            _ => unreachable!("optimizer state matches optimizer"),
        }
    }
}

/// Mean loss and gradients over a batch, computed shard by shard in
/// parallel and reduced in shard order.
fn batch_gradients<M: Trainable>(
    model: &M,
    data: &Dataset,
    idx: &[usize],
    shard: usize,
) -> Result<(f64, Vec<Tensor>, usize)> {
    let parts: Vec<(f32, Vec<Tensor>, usize, usize)> = idx
        .par_chunks(shard)
        .map(|chunk| {
            let (x, y) = data.batch(chunk)?;
            let (loss, grads, logits) = model.loss_and_grads(&x, &y)?;
            let correct = logits.argmax_rows().iter().zip(&y).filter(|(p, t)| p == t).count();
            Ok((loss, grads, chunk.len(), correct))
        })
        .collect::<Result<_>>()?;
    let total = idx.len() as f32;
    let mut loss = 0.0f64;
    let mut correct = 0;
    let mut acc: Vec<Tensor> = Vec::new();
    for (l, grads, len, c) in parts {
        let w = len as f32 / total;
        loss += f64::from(l) * f64::from(w);
        correct += c;
        if acc.is_empty() {
            acc = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.add_scaled_assign(g, w)?;
        }
    }
    Ok((loss, acc, correct))
}

/// Train for `cfg.epochs` epochs of seeded mini-batch descent on the mean
/// cross-entropy. `on_epoch` sees each epoch's statistics as they are
/// produced.
pub fn train_epochs<M: Trainable>(
    model: &mut M,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if let Some(spec) = &cfg.surrogate {
        model.set_surrogate(spec)?;
    }
    let mut state = OptState::new(&cfg.optimizer, &model.parameters());
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads, c) = match batch_gradients(&*model, train, batch, cfg.shard) {
                Err(Error::NonFinite { op }) => {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("non-finite values in {op}"),
                    })
                }
                other => other?,
            };
            if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {loss}"),
                });
            }
            state.apply(&cfg.optimizer, model.parameters_mut(), &grads);
            loss_sum += loss * batch.len() as f64;
            correct += c;
        }
        let test_accuracy = match test {
            Some(t) => Some(evaluate(&*model, t)?.accuracy),
            None => None,
        };
        let stats = EpochStats {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            test_accuracy,
        };
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Samples per true class.
    pub class_counts: Vec<usize>,
    /// Correct predictions per true class.
    pub class_correct: Vec<usize>,
}

/// Per-sample predictions in dataset order.
pub fn predict_all(model: &(impl Classifier + ?Sized), data: &Dataset) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<Vec<usize>> = idx
        .par_chunks(64)
        .map(|chunk| {
            let (x, _) = data.batch(chunk)?;
            model.predict(&x)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn evaluate(model: &(impl Classifier + ?Sized), data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict_all(model, data)?;
    let mut class_counts = vec![0; data.classes];
    let mut class_correct = vec![0; data.classes];
    for (&p, &t) in preds.iter().zip(&data.labels) {
        class_counts[t] += 1;
        if p == t {
            class_correct[t] += 1;
        }
    }
    let correct: usize = class_correct.iter().sum();
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        correct,
        total: data.len(),
        class_counts,
        class_correct,
    })
}

#[cfg(test)]
mod tests;
