//! Central finite differences, the reference every hand-written backward
//! pass is checked against.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate, in 64-bit.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite objective at coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Finite differences of a 32-bit function: perturbations and the
/// difference quotient stay in 64-bit, the function itself runs in 32-bit.
pub fn finite_difference_grad_f32<F>(mut f: F, x: &Tensor<f32>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f32>) -> Result<f32>,
{
    finite_difference_grad(|z| f(&z.cast::<f32>()).map(f64::from), &x.cast::<f64>(), h)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn relative_error<R: Real, S: Real>(a: &Tensor<R>, b: &Tensor<S>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}
