use rand::Rng;

use crate::numerics::{Real, Tensor};

/// Fan-in scaled uniform init, `U(−g·√(3/fan_in), g·√(3/fan_in))`.
/// `gain = √2` gives the Kaiming-uniform bound for ReLU layers.
pub fn kaiming_uniform<R: Real>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Tensor<R> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| R::of(rng.gen_range(-bound..bound)))
}
