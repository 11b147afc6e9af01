use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::numerics::Tensor;
use crate::train::predict_all;

/// Samples every model classifies correctly, balanced across classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    /// Dataset indices in ascending order.
    pub indices: Vec<usize>,
    /// `correct[m][k]` for model `m` and selected sample `k`.
    pub correct: Vec<Vec<bool>>,
    pub class_histogram: Vec<usize>,
    pub seed: u64,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn batch(&self, data: &Dataset) -> Result<(Tensor, Vec<usize>)> {
        data.batch(&self.indices)
    }

    /// Check that `models` still classify every selected sample correctly.
    pub fn verify(&self, models: &[&dyn Classifier], data: &Dataset) -> Result<()> {
        let (x, y) = self.batch(data)?;
        for (m, model) in models.iter().enumerate() {
            let preds = model.predict(&x)?;
            if let Some(k) = preds.iter().zip(&y).position(|(p, t)| p != t) {
                return Err(Error::Evaluation(format!(
                    "model {m} misclassifies evaluation sample {} (class {})",
                    self.indices[k], y[k]
                )));
            }
        }
        Ok(())
    }
}

/// Pick `n` samples correctly classified by every model with class counts
/// differing by at most one. Deterministic given `seed`.
pub fn select_eval_set(models: &[&dyn Classifier], data: &Dataset, n: usize, seed: u64) -> Result<EvalSet> {
    if n == 0 || models.is_empty() {
        return Err(Error::Config("evaluation set needs n >= 1 and at least one model".into()));
    }
    let preds = models.iter().map(|m| predict_all(*m, data)).collect::<Result<Vec<_>>>()?;
    let classes = data.classes;
    let mut pool: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &t) in data.labels.iter().enumerate() {
        if preds.iter().all(|p| p[i] == t) {
            pool[t].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut pool {
        p.shuffle(&mut rng);
    }
    let base = n / classes;
    let achievable = pool.iter().map(Vec::len).min().unwrap_or(0);
    if let Some(c) = (0..classes).find(|&c| pool[c].len() < base) {
        return Err(Error::Selection {
            class: c,
            available: pool[c].len(),
            needed: base,
            achievable_per_class: achievable,
        });
    }
    let mut counts = vec![base; classes];
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng);
    let mut extra = n % classes;
    for &c in &order {
        if extra == 0 {
            break;
        }
        if pool[c].len() > base {
            counts[c] += 1;
            extra -= 1;
        }
    }
    if extra > 0 {
        let c = order.iter().copied().find(|&c| pool[c].len() <= base).unwrap_or(0);
        return Err(Error::Selection {
            class: c,
            available: pool[c].len(),
            needed: base + 1,
            achievable_per_class: achievable,
        });
    }
    let mut indices: Vec<usize> = pool
        .iter()
        .zip(&counts)
        .flat_map(|(p, &k)| p[..k].iter().copied())
        .collect();
    indices.sort_unstable();
    let correct = preds
        .iter()
        .map(|p| indices.iter().map(|&i| p[i] == data.labels[i]).collect())
        .collect();
    Ok(EvalSet {
        indices,
        correct,
        class_histogram: counts,
        seed,
    })
}
