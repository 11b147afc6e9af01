use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub label: usize,
    /// Per model: the adversarial example is misclassified.
    pub success: Vec<bool>,
    pub linf: f32,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub models: Vec<String>,
    pub samples: Vec<SampleOutcome>,
    pub success_rate: Vec<f64>,
    /// Fraction misclassified by every model.
    pub joint_success_rate: f64,
}

impl AttackReport {
    pub fn evaluate(
        models: &[&dyn Classifier],
        names: &[String],
        x: &Tensor,
        x_adv: &Tensor,
        labels: &[usize],
        iterations: usize,
    ) -> Result<Self> {
        if names.len() != models.len() {
            return Err(Error::Config(format!("{} names for {} models", names.len(), models.len())));
        }
        if x.shape() != x_adv.shape() || x.rows() != labels.len() || labels.is_empty() {
            return Err(Error::dim(
                "attack report",
                format!("{:?} vs {:?} with {} labels", x.shape(), x_adv.shape(), labels.len()),
            ));
        }
        let preds = models.iter().map(|m| m.predict(x_adv)).collect::<Result<Vec<_>>>()?;
        let w = x.row_len();
        let samples: Vec<SampleOutcome> = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let linf = x.data()[i * w..(i + 1) * w]
                    .iter()
                    .zip(&x_adv.data()[i * w..(i + 1) * w])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                SampleOutcome {
                    label,
                    success: preds.iter().map(|p| p[i] != label).collect(),
                    linf,
                    iterations,
                }
            })
            .collect();
        Ok(Self::from_samples(names.to_vec(), samples))
    }

    pub fn from_samples(models: Vec<String>, samples: Vec<SampleOutcome>) -> Self {
        let n = samples.len().max(1) as f64;
        let success_rate = (0..models.len())
            .map(|m| samples.iter().filter(|s| s.success[m]).count() as f64 / n)
            .collect();
        let joint = samples.iter().filter(|s| s.success.iter().all(|&b| b)).count() as f64 / n;
        Self {
            models,
            samples,
            success_rate,
            joint_success_rate: joint,
        }
    }

    pub fn max_linf(&self) -> f32 {
        self.samples.iter().map(|s| s.linf).fold(0.0, f32::max)
    }
}
