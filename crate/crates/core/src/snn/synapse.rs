use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// IIR synapse `X[t] = Σ_{p=1..P} α_p X[t−p] + Σ_{q=0..Q} β_q S[t−q]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynapseConfig {
    /// `α_1 ..= α_P`
    feedback: Vec<f64>,
    /// `β_0 ..= β_Q`
    feedforward: Vec<f64>,
}

impl Default for SynapseConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl SynapseConfig {
    /// Stateless synapse, `X[t] = S[t]`.
    pub fn identity() -> Self {
        Self {
            feedback: Vec::new(),
            feedforward: vec![1.0],
        }
    }

    pub fn new(feedback: Vec<f64>, feedforward: Vec<f64>) -> Result<Self> {
        if feedforward.is_empty() {
            return Err(Error::Config("synapse needs at least β_0".into()));
        }
        if feedback.iter().chain(&feedforward).any(|c| !c.is_finite()) {
            return Err(Error::Config("synapse coefficients must be finite".into()));
        }
        if !is_stable(&feedback) {
            return Err(Error::Config(format!(
                "unstable synapse: roots of 1 − Σ α_p z^-p not inside the unit circle for α = {feedback:?}"
            )));
        }
        Ok(Self {
            feedback,
            feedforward,
        })
    }

    pub fn feedback(&self) -> &[f64] {
        &self.feedback
    }

    pub fn feedforward(&self) -> &[f64] {
        &self.feedforward
    }

    pub fn is_identity(&self) -> bool {
        self.feedback.is_empty() && self.feedforward == [1.0]
    }

    /// First `len` taps of the impulse response.
    pub fn impulse_response(&self, len: usize) -> Vec<f64> {
        let mut s = vec![0.0; len];
        if len > 0 {
            s[0] = 1.0;
        }
        let mut x: Vec<f64> = Vec::with_capacity(len);
        for t in 0..len {
            let mut acc = 0.0;
            for (p, a) in self.feedback.iter().enumerate() {
                if let Some(prev) = t.checked_sub(p + 1) {
                    acc += a * x[prev];
                }
            }
            for (q, b) in self.feedforward.iter().enumerate() {
                if let Some(prev) = t.checked_sub(q) {
                    acc += b * s[prev];
                }
            }
            x.push(acc);
        }
        x
    }
}

/// Schur–Cohn step-down test on `1 − Σ α_p z^{−p}`.
fn is_stable(feedback: &[f64]) -> bool {
    // a_0 = 1, a_p = −α_p
    let mut a: Vec<f64> = std::iter::once(1.0)
        .chain(feedback.iter().map(|&x| -x))
        .collect();
    while a.len() > 1 {
        let m = a.len() - 1;
        let k = a[m];
        if k.abs() >= 1.0 {
            return false;
        }
        let denom = 1.0 - k * k;
        let next: Vec<f64> = (0..m).map(|i| (a[i] - k * a[m - i]) / denom).collect();
        a = next;
    }
    true
}

/// Synaptic state at time `t` from zero-padded histories.
///
/// `spikes` holds `S[1..=t]` and `states` holds `X[1..t]` (oldest first).
pub fn synapse_iir<R: Real>(
    cfg: &SynapseConfig,
    spikes: &[Tensor<R>],
    states: &[Tensor<R>],
) -> Result<Tensor<R>> {
    let current = spikes
        .last()
        .ok_or_else(|| Error::State("synapse needs the current input S[t]".into()))?;
    if states.len() + 1 != spikes.len() {
        return Err(Error::State(format!(
            "synapse history mismatch: {} inputs, {} past states",
            spikes.len(),
            states.len()
        )));
    }
    let mut out = Tensor::zeros(current.shape());
    for (p, &a) in cfg.feedback.iter().enumerate() {
        if let Some(idx) = states.len().checked_sub(p + 1) {
            out.add_scaled_assign(&states[idx], R::of(a))?;
        }
    }
    for (q, &b) in cfg.feedforward.iter().enumerate() {
        if let Some(idx) = (spikes.len() - 1).checked_sub(q) {
            out.add_scaled_assign(&spikes[idx], R::of(b))?;
        }
    }
    out.ensure_finite("synapse_iir")
}

/// Adjoint of [`synapse_iir`] over a whole sequence: maps `∂L/∂X[t]` to
/// `∂L/∂S[t]` for `t = 1..=T`.
pub(crate) fn synapse_backward<R: Real>(
    cfg: &SynapseConfig,
    grad_states: Vec<Tensor<R>>,
) -> Result<Vec<Tensor<R>>> {
    if cfg.is_identity() {
        return Ok(grad_states);
    }
    let steps = grad_states.len();
    // total gradient on X[t], including its feedback into X[t+p]
    let mut total: Vec<Tensor<R>> = grad_states;
    for t in (0..steps).rev() {
        for (p, &a) in cfg.feedback.iter().enumerate() {
            let later = t + p + 1;
            if later < steps {
                let contrib = total[later].clone();
                total[t].add_scaled_assign(&contrib, R::of(a))?;
            }
        }
    }
    let mut grad_spikes = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut g = Tensor::zeros(total[t].shape());
        for (q, &b) in cfg.feedforward.iter().enumerate() {
            if t + q < steps {
                g.add_scaled_assign(&total[t + q], R::of(b))?;
            }
        }
        grad_spikes.push(g);
    }
    Ok(grad_spikes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run(cfg: &SynapseConfig, input: &[f64]) -> Vec<f64> {
        let mut spikes = Vec::new();
        let mut states: Vec<Tensor<f64>> = Vec::new();
        for &s in input {
            spikes.push(Tensor::new(vec![1], vec![s]).unwrap());
            let x = synapse_iir(cfg, &spikes, &states).unwrap();
            states.push(x);
        }
        states.iter().map(|x| x.data()[0]).collect()
    }

    #[test]
    fn identity_passes_input_through() {
        let cfg = SynapseConfig::identity();
        assert!(cfg.is_identity());
        let input = [0.0, 1.0, 1.0, 0.0, 1.0];
        assert_eq!(run(&cfg, &input), input.to_vec());
    }

    #[test]
    fn first_order_impulse_is_geometric() {
        let cfg = SynapseConfig::new(vec![0.5], vec![1.0]).unwrap();
        let mut impulse = vec![0.0; 6];
        impulse[0] = 1.0;
        assert_eq!(run(&cfg, &impulse), vec![1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125]);
    }

    #[test]
    fn matches_convolution_with_impulse_response() {
        let cfg = SynapseConfig::new(vec![1.2, -0.5], vec![0.6, 0.3, -0.1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input: Vec<f64> = (0..20).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let h = cfg.impulse_response(20);
        let direct = run(&cfg, &input);
        for t in 0..20 {
            let conv: f64 = (0..=t).map(|j| h[j] * input[t - j]).sum();
            assert!((direct[t] - conv).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn stability_check_matches_quadratic_roots() {
        // z² − α1 z − α2: compare against explicit root magnitudes
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let a1: f64 = rng.gen_range(-2.5..2.5);
            let a2: f64 = rng.gen_range(-1.5..1.5);
            let disc = a1 * a1 + 4.0 * a2;
            let max_root = if disc >= 0.0 {
                ((a1 + disc.sqrt()) / 2.0).abs().max(((a1 - disc.sqrt()) / 2.0).abs())
            } else {
                (-a2).sqrt()
            };
            if (max_root - 1.0).abs() < 1e-6 {
                continue;
            }
            assert_eq!(is_stable(&[a1, a2]), max_root < 1.0, "α=({a1},{a2})");
        }
        assert!(SynapseConfig::new(vec![1.0], vec![1.0]).is_err());
        assert!(SynapseConfig::new(vec![0.5, 0.6], vec![1.0]).is_err());
        assert!(SynapseConfig::new(vec![1.5, -0.7], vec![1.0]).is_ok());
    }

    #[test]
    fn backward_is_the_adjoint() {
        // ⟨g, A s⟩ == ⟨Aᵀ g, s⟩ for the linear map s ↦ X
        let cfg = SynapseConfig::new(vec![0.7, -0.2], vec![0.5, 0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let input: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = run(&cfg, &input);
        let lhs: f64 = g.iter().zip(&x).map(|(a, b)| a * b).sum();
        let gt: Vec<Tensor<f64>> = g.iter().map(|&v| Tensor::new(vec![1], vec![v]).unwrap()).collect();
        let back = synapse_backward(&cfg, gt).unwrap();
        let rhs: f64 = back.iter().zip(&input).map(|(a, b)| a.data()[0] * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
