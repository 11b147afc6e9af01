use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ce_gradient, check_batch, concat_rows, project_into, sharded, signed_step, AttackConfig};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::numerics::Tensor;

const FGSM_SHARD: usize = 16;

/// One signed gradient step of size `eps`, clipped to `[0, 1]`.
pub fn fgsm(model: &dyn Classifier, x: &Tensor, labels: &[usize], eps: f32) -> Result<Tensor> {
    check_batch(x, labels)?;
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Config(format!("eps {eps} not in [0, 1]")));
    }
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let parts = sharded(x, labels, FGSM_SHARD, |xs, ys, _| {
        let g = ce_gradient(model, xs, ys)?.grad;
        let mut adv = xs.clone();
        signed_step(&mut adv, &g, eps, xs, eps)?;
        Ok(adv)
    })?;
    concat_rows(parts, x)
}

fn random_start(x: &Tensor, eps: f32, seed: u64, first_row: usize) -> Tensor {
    let mut out = x.clone();
    let w = x.row_len();
    for (r, row) in out.data_mut().chunks_mut(w).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((first_row + r) as u64));
        for v in row {
            *v += rng.gen_range(-eps..=eps);
        }
    }
    project_into(&mut out, x, eps);
    out
}

fn pgd_core(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    first_row: usize,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let mut adv = if cfg.random_start {
        random_start(x, cfg.eps, cfg.seed, first_row)
    } else {
        x.clone()
    };
    if let Some(t) = trace.as_deref_mut() {
        t.push(adv.clone());
    }
    for _ in 0..cfg.iterations {
        let g = ce_gradient(model, &adv, labels)?.grad;
        signed_step(&mut adv, &g, cfg.eps_step, x, cfg.eps)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(adv.clone());
        }
    }
    Ok(adv)
}

fn early_exit(x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Option<Tensor>> {
    check_batch(x, labels)?;
    if cfg.eps == 0.0 {
        return Ok(Some(x.clone()));
    }
    cfg.validate()?;
    Ok(None)
}

/// Projected gradient descent: optional seeded random start, then
/// `cfg.iterations` signed steps of `cfg.eps_step`, projecting each time.
pub fn pgd(model: &dyn Classifier, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    if let Some(x) = early_exit(x, labels, cfg)? {
        return Ok(x);
    }
    let parts = sharded(x, labels, cfg.shard, |xs, ys, lo| pgd_core(model, xs, ys, cfg, lo, None))?;
    concat_rows(parts, x)
}

/// PGD iterates `x_0 ..= x_N` over the whole batch.
pub fn pgd_trace(model: &dyn Classifier, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Vec<Tensor>> {
    if let Some(x) = early_exit(x, labels, cfg)? {
        return Ok(vec![x]);
    }
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    pgd_core(model, x, labels, cfg, 0, Some(&mut trace))?;
    Ok(trace)
}

fn mim_core(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let step = cfg.eps / cfg.iterations as f32;
    let w = x.row_len();
    let mut adv = x.clone();
    let mut acc = Tensor::zeros(x.shape());
    if let Some(t) = trace.as_deref_mut() {
        t.push(adv.clone());
    }
    for _ in 0..cfg.iterations {
        let g = ce_gradient(model, &adv, labels)?.grad;
        for (a, gr) in acc.data_mut().chunks_mut(w).zip(g.data().chunks(w)) {
            let l1: f32 = gr.iter().map(|v| v.abs()).sum();
            for (ai, &gi) in a.iter_mut().zip(gr) {
                *ai = cfg.momentum * *ai + if l1 > 0.0 { gi / l1 } else { 0.0 };
            }
        }
        signed_step(&mut adv, &acc, step, x, cfg.eps)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(adv.clone());
        }
    }
    Ok(adv)
}

/// Momentum iterative method: step `ε/N` along the sign of the decayed sum
/// of per-sample L1-normalized gradients.
pub fn mim(model: &dyn Classifier, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    if let Some(x) = early_exit(x, labels, cfg)? {
        return Ok(x);
    }
    let parts = sharded(x, labels, cfg.shard, |xs, ys, _| mim_core(model, xs, ys, cfg, None))?;
    concat_rows(parts, x)
}

pub fn mim_trace(model: &dyn Classifier, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Vec<Tensor>> {
    if let Some(x) = early_exit(x, labels, cfg)? {
        return Ok(vec![x]);
    }
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    mim_core(model, x, labels, cfg, Some(&mut trace))?;
    Ok(trace)
}
