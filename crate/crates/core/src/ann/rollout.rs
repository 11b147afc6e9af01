use crate::ann::AttentionRecords;
use crate::error::{Error, Result};
use crate::numerics::{identity, Real, Tensor};

/// `Π_l (1/n_h) Σ_i (0.5·W_{l,i} + 0.5·I)`, later layers on the left.
pub fn rollout_matrix<R: Real>(records: &AttentionRecords<R>) -> Result<Tensor<R>> {
    let first = records
        .first()
        .and_then(|heads| heads.first())
        .ok_or_else(|| Error::dim("attention_rollout", "no attention records"))?;
    let n = first.shape()[0];
    let eye = identity::<R>(n);
    let half = R::of(0.5);
    let mut joint = eye.clone();
    for (l, heads) in records.iter().enumerate() {
        if heads.is_empty() {
            return Err(Error::dim("attention_rollout", format!("layer {l} has no heads")));
        }
        let mut avg = Tensor::zeros(&[n, n]);
        for w in heads {
            if w.shape() != [n, n] {
                return Err(Error::dim(
                    "attention_rollout",
                    format!("layer {l}: matrix {:?}, expected [{n}, {n}]", w.shape()),
                ));
            }
            avg.add_scaled_assign(w, half)?;
            avg.add_scaled_assign(&eye, half)?;
        }
        let avg = avg.scale(R::one() / R::of(heads.len() as f64))?;
        joint = avg.matmul(&joint)?;
    }
    Ok(joint)
}

/// Pixel-space attention mask `φ = rollout ⊙ x` for one `[c, h, w]` sample.
///
/// The class-token row of the rollout matrix, restricted to patch tokens, is
/// scaled to peak 1 and spread over each patch's pixels and channels. A row
/// with no mass on the patches falls back to uniform weights.
pub fn attention_rollout<R: Real>(records: &AttentionRecords<R>, x: &Tensor<R>, patch: usize) -> Result<Tensor<R>> {
    let s = x.shape();
    if s.len() != 3 || patch == 0 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(Error::dim(
            "attention_rollout",
            format!("input {s:?} is not a [c, h, w] image divisible into {patch}-pixel patches"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let joint = rollout_matrix(records)?;
    if joint.shape()[0] != gh * gw + 1 {
        return Err(Error::dim(
            "attention_rollout",
            format!("{} tokens for {} patches plus class token", joint.shape()[0], gh * gw),
        ));
    }
    let mut weights = joint.row(0)[1..].to_vec();
    let peak = weights.iter().fold(R::zero(), |m, &v| m.max(v));
    if peak > R::zero() {
        weights.iter_mut().for_each(|v| *v = *v / peak);
    } else {
        weights.iter_mut().for_each(|v| *v = R::one());
    }
    let mut out = x.clone();
    let d = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                d[(ch * h + y) * w + xx] *= weights[(y / patch) * gw + xx / patch];
            }
        }
    }
    Ok(out)
}

/// All-ones tensor shaped like `x`, the mask used for non-attention models.
pub fn ones_mask<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    Tensor::ones(x.shape())
}
