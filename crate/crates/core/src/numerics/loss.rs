use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Row-wise softmax of a `[n, c]` tensor, max-subtracted.
pub fn softmax<R: Real>(logits: &Tensor<R>) -> Tensor<R> {
    let c = logits.row_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        let mut total = R::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

fn check_labels(n: usize, c: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("{n} logit rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits,
/// `(softmax − onehot) / n`.
pub fn softmax_cross_entropy<R: Real>(
    logits: &Tensor<R>,
    labels: &[usize],
) -> Result<(R, Tensor<R>)> {
    let n = logits.rows();
    let c = logits.row_len();
    check_labels(n, c, labels)?;
    let mut grad = softmax(logits);
    let inv_n = R::one() / R::of(n as f64);
    let mut loss = R::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<R>().ln() + max;
        loss += lse - row[label];
        let g = grad.row_mut(i);
        g[label] -= R::one();
        for v in g.iter_mut() {
            *v *= inv_n;
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "softmax_cross_entropy",
        });
    }
    Ok((loss, grad.ensure_finite("softmax_cross_entropy")?))
}

/// Non-targeted softmax margin `max(s_t − max_{j≠t} s_j, −κ)` summed over
/// the batch, and its gradient w.r.t. the logits. Positive while the true
/// class still wins; minimizing it drives misclassification. The gradient is
/// zero for rows where the `−κ` floor is active.
pub fn softmax_margin<R: Real>(
    logits: &Tensor<R>,
    labels: &[usize],
    kappa: R,
) -> Result<(R, Tensor<R>)> {
    let n = logits.rows();
    let c = logits.row_len();
    check_labels(n, c, labels)?;
    let probs = softmax(logits);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = R::zero();
    for (i, &t) in labels.iter().enumerate() {
        let s = probs.row(i);
        let mut best = if t == 0 { 1 } else { 0 };
        for j in 0..c {
            if j != t && s[j] > s[best] {
                best = j;
            }
        }
        let margin = s[t] - s[best];
        if margin > -kappa {
            total += margin;
            // d s_a / d z_k = s_a (δ_ak − s_k)
            let g = grad.row_mut(i);
            for k in 0..c {
                let d_best = s[best] * (if k == best { R::one() } else { R::zero() } - s[k]);
                let d_true = s[t] * (if k == t { R::one() } else { R::zero() } - s[k]);
                g[k] = d_true - d_best;
            }
        } else {
            total += -kappa;
        }
    }
    Ok((total, grad))
}
