use serde::{Deserialize, Serialize};

use super::{ce_gradient, check_batch, concat_rows, sharded, signed_step, AttackConfig};
use crate::error::{Error, Result};
use crate::model::{Classifier, InputGradient};
use crate::numerics::{softmax_margin, Tensor};

fn check_models(models: &[&dyn Classifier]) -> Result<()> {
    if models.is_empty() {
        return Err(Error::Config("multi-model attack needs at least one model".into()));
    }
    Ok(())
}

fn check_alpha(alpha: &[f32], m: usize) -> Result<()> {
    if alpha.len() != m {
        return Err(Error::Config(format!("{} coefficients for {m} models", alpha.len())));
    }
    if alpha.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
        return Err(Error::Config(format!("coefficients {alpha:?} must be finite and >= 0")));
    }
    Ok(())
}

/// Blended direction `Σ_m α_m[row] · φ_m ⊙ ∇L_m`.
fn blend(infos: &[InputGradient], alpha: &[Vec<f32>], shape: &[usize]) -> Tensor {
    let mut dir = Tensor::zeros(shape);
    let w = dir.row_len();
    for (m, info) in infos.iter().enumerate() {
        let mask = info.mask.as_ref();
        for (r, out) in dir.data_mut().chunks_mut(w).enumerate() {
            let a = alpha[r][m];
            if a == 0.0 {
                continue;
            }
            let g = info.grad.row(r);
            match mask {
                Some(phi) => {
                    for ((o, &gi), &pi) in out.iter_mut().zip(g).zip(phi.row(r)) {
                        *o += a * pi * gi;
                    }
                }
                None => {
                    for (o, &gi) in out.iter_mut().zip(g) {
                        *o += a * gi;
                    }
                }
            }
        }
    }
    dir
}

fn saga_core(
    models: &[&dyn Classifier],
    alpha: &[f32],
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let per_row = vec![alpha.to_vec(); labels.len()];
    let mut adv = x.clone();
    if let Some(t) = trace.as_deref_mut() {
        t.push(adv.clone());
    }
    for _ in 0..cfg.iterations {
        let infos = models
            .iter()
            .map(|m| ce_gradient(*m, &adv, labels))
            .collect::<Result<Vec<_>>>()?;
        let dir = blend(&infos, &per_row, x.shape());
        signed_step(&mut adv, &dir, cfg.eps_step, x, cfg.eps)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(adv.clone());
        }
    }
    Ok(adv)
}

fn saga_setup(models: &[&dyn Classifier], alpha: &[f32], x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<bool> {
    check_models(models)?;
    check_alpha(alpha, models.len())?;
    check_batch(x, labels)?;
    if cfg.eps == 0.0 {
        return Ok(false);
    }
    cfg.validate()?;
    Ok(true)
}

/// Self-attention gradient attack with fixed coefficients: signed steps
/// along `Σ α_m φ_m ⊙ ∇L_m`, where `φ_m` is the attention rollout for
/// attention models and all ones otherwise.
pub fn saga(
    models: &[&dyn Classifier],
    alpha: &[f32],
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    if !saga_setup(models, alpha, x, labels, cfg)? {
        return Ok(x.clone());
    }
    let parts = sharded(x, labels, cfg.shard, |xs, ys, _| saga_core(models, alpha, xs, ys, cfg, None))?;
    concat_rows(parts, x)
}

pub fn saga_trace(
    models: &[&dyn Classifier],
    alpha: &[f32],
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<Tensor>> {
    if !saga_setup(models, alpha, x, labels, cfg)? {
        return Ok(vec![x.clone()]);
    }
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    saga_core(models, alpha, x, labels, cfg, Some(&mut trace))?;
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoSagaOutput {
    pub x_adv: Tensor,
    /// Coefficients per sample, per iteration (index 0 is the start), per
    /// model.
    pub alpha: Vec<Vec<Vec<f32>>>,
    /// Times a sample's coefficients all hit zero and were reset to uniform.
    pub alpha_resets: usize,
}

fn initial_alpha(cfg: &AttackConfig, m: usize) -> Result<Vec<f32>> {
    match &cfg.alpha {
        Some(a) => {
            check_alpha(a, m)?;
            let mut a = a.clone();
            if cfg.normalize_alpha {
                normalize(&mut a);
            }
            Ok(a)
        }
        None => Ok(vec![1.0 / m as f32; m]),
    }
}

/// Clamp to `≥ 0` and rescale to sum 1. Returns `true` when everything was
/// zero and the coefficients were reset to uniform.
fn normalize(alpha: &mut [f32]) -> bool {
    for a in alpha.iter_mut() {
        if !(*a > 0.0) {
            *a = 0.0;
        }
    }
    let total: f32 = alpha.iter().sum();
    if total > 0.0 && total.is_finite() {
        alpha.iter_mut().for_each(|a| *a /= total);
        false
    } else {
        let u = 1.0 / alpha.len() as f32;
        alpha.iter_mut().for_each(|a| *a = u);
        true
    }
}

fn sech2(z: f32) -> f32 {
    let c = z.cosh();
    1.0 / (c * c)
}

struct AutoChunk {
    x_adv: Tensor,
    alpha: Vec<Vec<Vec<f32>>>,
    resets: usize,
}

fn auto_saga_core(
    models: &[&dyn Classifier],
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Result<AutoChunk> {
    let n = labels.len();
    let w = x.row_len();
    let init = initial_alpha(cfg, models.len())?;
    let mut alpha = vec![init; n];
    let mut history: Vec<Vec<Vec<f32>>> = alpha.iter().map(|a| vec![a.clone()]).collect();
    let mut resets = 0;
    let mut adv = x.clone();
    if let Some(t) = trace.as_deref_mut() {
        t.push(adv.clone());
    }
    let margin = |z: &Tensor| softmax_margin(z, labels, cfg.kappa);
    for _ in 0..cfg.iterations {
        let infos = models
            .iter()
            .map(|m| ce_gradient(*m, &adv, labels))
            .collect::<Result<Vec<_>>>()?;
        let dir = blend(&infos, &alpha, x.shape());
        signed_step(&mut adv, &dir, cfg.eps_step, x, cfg.eps)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(adv.clone());
        }

        // ∂x/∂α_m ≈ u·ε_step·sech²(u·Σ_k ∇L_k) ⊙ ∇L_m
        let mut total = Tensor::zeros(x.shape());
        for info in &infos {
            total.add_scaled_assign(&info.grad, 1.0)?;
        }
        let fitted = total.map(|s| cfg.fit * cfg.eps_step * sech2(cfg.fit * s));

        let mut grad_f = Tensor::zeros(x.shape());
        for m in models {
            grad_f.add_scaled_assign(&m.input_gradient(&adv, &margin)?.grad, 1.0)?;
        }

        for r in 0..n {
            let gf = grad_f.row(r);
            let fr = fitted.row(r);
            for (m, info) in infos.iter().enumerate() {
                let g = info.grad.row(r);
                let d: f32 = (0..w).map(|i| gf[i] * fr[i] * g[i]).sum();
                alpha[r][m] -= cfg.coef_lr * d;
            }
            if cfg.normalize_alpha && normalize(&mut alpha[r]) {
                resets += 1;
            }
            history[r].push(alpha[r].clone());
        }
    }
    Ok(AutoChunk {
        x_adv: adv,
        alpha: history,
        resets,
    })
}

fn auto_setup(models: &[&dyn Classifier], x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Option<AutoSagaOutput>> {
    check_models(models)?;
    check_batch(x, labels)?;
    if cfg.eps == 0.0 {
        let a = initial_alpha(cfg, models.len())?;
        return Ok(Some(AutoSagaOutput {
            x_adv: x.clone(),
            alpha: vec![vec![a]; labels.len()],
            alpha_resets: 0,
        }));
    }
    cfg.validate()?;
    Ok(None)
}

/// SAGA with per-sample coefficients adapted every iteration by descending
/// the summed softmax margin of all models at the new iterate.
pub fn auto_saga(models: &[&dyn Classifier], x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AutoSagaOutput> {
    if let Some(out) = auto_setup(models, x, labels, cfg)? {
        return Ok(out);
    }
    let parts = sharded(x, labels, cfg.shard, |xs, ys, _| auto_saga_core(models, xs, ys, cfg, None))?;
    let mut alpha = Vec::with_capacity(labels.len());
    let mut resets = 0;
    let mut advs = Vec::with_capacity(parts.len());
    for p in parts {
        alpha.extend(p.alpha);
        resets += p.resets;
        advs.push(p.x_adv);
    }
    Ok(AutoSagaOutput {
        x_adv: concat_rows(advs, x)?,
        alpha,
        alpha_resets: resets,
    })
}

/// [`auto_saga`] together with the iterates `x_0 ..= x_N`.
pub fn auto_saga_trace(
    models: &[&dyn Classifier],
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<(AutoSagaOutput, Vec<Tensor>)> {
    if let Some(out) = auto_setup(models, x, labels, cfg)? {
        return Ok((out, vec![x.clone()]));
    }
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let c = auto_saga_core(models, x, labels, cfg, Some(&mut trace))?;
    Ok((
        AutoSagaOutput {
            x_adv: c.x_adv,
            alpha: c.alpha,
            alpha_resets: c.resets,
        },
        trace,
    ))
}
