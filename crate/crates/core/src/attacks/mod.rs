//! White-box l∞ attacks: FGSM, PGD, MIM and the multi-model SAGA and
//! Auto-SAGA attacks.

mod ensemble;
mod report;
mod single;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classifier, InputGradient};
use crate::numerics::{softmax_cross_entropy, Tensor};

pub use ensemble::{auto_saga, auto_saga_trace, saga, saga_trace, AutoSagaOutput};
pub use report::{AttackReport, SampleOutcome};
pub use single::{fgsm, mim, mim_trace, pgd, pgd_trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Mim,
    Saga,
    AutoSaga,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Mim => "mim",
            AttackKind::Saga => "saga",
            AttackKind::AutoSaga => "autosaga",
        }
    }

    /// Run against `models`. Single-model attacks use the first model;
    /// SAGA takes `cfg.alpha` or uniform weights.
    pub fn run(self, models: &[&dyn Classifier], x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
        let first = *models
            .first()
            .ok_or_else(|| Error::Config("attack needs at least one model".into()))?;
        match self {
            AttackKind::Fgsm => fgsm(first, x, labels, cfg.eps),
            AttackKind::Pgd => pgd(first, x, labels, cfg),
            AttackKind::Mim => mim(first, x, labels, cfg),
            AttackKind::Saga => {
                let uniform = vec![1.0 / models.len() as f32; models.len()];
                saga(models, cfg.alpha.as_deref().unwrap_or(&uniform), x, labels, cfg)
            }
            AttackKind::AutoSaga => Ok(auto_saga(models, x, labels, cfg)?.x_adv),
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "mim" => Ok(AttackKind::Mim),
            "saga" | "basicsaga" => Ok(AttackKind::Saga),
            "autosaga" => Ok(AttackKind::AutoSaga),
            _ => Err(Error::Config(format!(
                "unknown attack '{s}' (expected fgsm, pgd, mim, saga, autosaga)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// l∞ budget `ε_max`.
    pub eps: f32,
    pub eps_step: f32,
    pub iterations: usize,
    /// MIM momentum decay `μ`.
    pub momentum: f32,
    /// Confidence `κ` of the Auto-SAGA margin loss.
    pub kappa: f32,
    /// Auto-SAGA coefficient learning rate `r`.
    pub coef_lr: f32,
    /// Fitting factor `u` of the sech² derivative approximation.
    pub fit: f32,
    /// Initial per-model coefficients; uniform `1/M` when `None`.
    pub alpha: Option<Vec<f32>>,
    /// PGD starts from a uniform point in the ε-ball.
    pub random_start: bool,
    pub seed: u64,
    /// Clamp Auto-SAGA coefficients to `≥ 0` and renormalize to sum 1.
    pub normalize_alpha: bool,
    /// Samples per parallel shard.
    pub shard: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            eps: 0.031,
            eps_step: 0.01,
            iterations: 40,
            momentum: 1.0,
            kappa: 0.0,
            coef_lr: 10_000.0,
            fit: 1.0,
            alpha: None,
            random_start: true,
            seed: 0,
            normalize_alpha: true,
            shard: 16,
        }
    }
}

impl AttackConfig {
    /// Defaults for Auto-SAGA runs (`ε_step = 0.005`).
    pub fn auto_saga() -> Self {
        Self {
            eps_step: 0.005,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.eps) {
            bad.push(format!("eps {} not in [0, 1]", self.eps));
        }
        if self.eps > 0.0 && !(self.eps_step > 0.0 && self.eps_step <= self.eps) {
            bad.push(format!("eps_step {} not in (0, eps={}]", self.eps_step, self.eps));
        }
        if self.iterations == 0 {
            bad.push("iterations must be >= 1".into());
        }
        if !(self.momentum >= 0.0) {
            bad.push(format!("momentum {} < 0", self.momentum));
        }
        if !(self.kappa >= 0.0) {
            bad.push(format!("kappa {} < 0", self.kappa));
        }
        if !(self.coef_lr > 0.0) {
            bad.push(format!("coef_lr {} must be > 0", self.coef_lr));
        }
        if !(self.fit > 0.0) {
            bad.push(format!("fit {} must be > 0", self.fit));
        }
        if let Some(a) = &self.alpha {
            if a.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                bad.push(format!("alpha {a:?} must be finite and >= 0"));
            }
        }
        if self.shard == 0 {
            bad.push("shard must be >= 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Clamp into `[x − ε, x + ε]` and then into the pixel range `[0, 1]`.
pub fn project(x_adv: &Tensor, x: &Tensor, eps: f32) -> Result<Tensor> {
    if x_adv.shape() != x.shape() {
        return Err(Error::dim(
            "project",
            format!("{:?} vs {:?}", x_adv.shape(), x.shape()),
        ));
    }
    let mut out = x_adv.clone();
    project_into(&mut out, x, eps);
    Ok(out)
}

pub(crate) fn project_into(x_adv: &mut Tensor, x: &Tensor, eps: f32) {
    for (a, &c) in x_adv.data_mut().iter_mut().zip(x.data()) {
        *a = a.max(c - eps).min(c + eps).clamp(0.0, 1.0);
    }
}

/// `x += step · sign(dir)` followed by projection.
pub(crate) fn signed_step(x_adv: &mut Tensor, dir: &Tensor, step: f32, x: &Tensor, eps: f32) -> Result<()> {
    x_adv.add_scaled_assign(&dir.sign(), step)?;
    project_into(x_adv, x, eps);
    Ok(())
}

/// Per-sample cross-entropy gradients (summed loss, so each row is that
/// sample's own gradient).
pub(crate) fn ce_gradient(model: &dyn Classifier, x: &Tensor, labels: &[usize]) -> Result<InputGradient> {
    let n = labels.len() as f32;
    model.input_gradient(x, &|z: &Tensor| {
        let (loss, g) = softmax_cross_entropy(z, labels)?;
        Ok((loss * n, g.scale(n)?))
    })
}

pub(crate) fn check_batch(x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.rank() < 2 || x.rows() != labels.len() {
        return Err(Error::dim(
            "attack",
            format!("batch {:?} with {} labels", x.shape(), labels.len()),
        ));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("attack inputs must lie in [0, 1]".into()));
    }
    Ok(())
}

fn slice_rows(x: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    let w = x.row_len();
    let mut shape = x.shape().to_vec();
    shape[0] = hi - lo;
    Tensor::new(shape, x.data()[lo * w..hi * w].to_vec())
}

pub(crate) fn concat_rows(parts: Vec<Tensor>, like: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(like.len());
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::new(like.shape().to_vec(), data)
}

/// Run `f(chunk, labels, first_row)` over fixed-size row shards in
/// parallel, keeping shard order.
pub(crate) fn sharded<T: Send>(
    x: &Tensor,
    labels: &[usize],
    shard: usize,
    f: impl Fn(&Tensor, &[usize], usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let starts: Vec<usize> = (0..labels.len()).step_by(shard).collect();
    starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + shard).min(labels.len());
            f(&slice_rows(x, lo, hi)?, &labels[lo..hi], lo)
        })
        .collect()
}
