use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::surrogate::heaviside;

/// Membrane dynamics variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NeuronKind {
    /// `V[t] = λ(1 − O[t−1])V[t−1] + I[t]`
    HardReset,
    /// `V[t] = λV[t−1] + I[t] − ϑ·O[t−1]`
    SoftReset,
    /// `V[t] = λV[t−1] + I[t] − ϑ·k[t−1]`, `k[t] = φ·k[t−1] + O[t−1]`
    Adaptive { decay: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronConfig {
    pub leak: f64,
    pub threshold: f64,
    pub kind: NeuronKind,
}

impl NeuronConfig {
    pub fn lif_hard(leak: f64, threshold: f64) -> Self {
        Self {
            leak,
            threshold,
            kind: NeuronKind::HardReset,
        }
    }

    pub fn lif_soft(leak: f64, threshold: f64) -> Self {
        Self {
            leak,
            threshold,
            kind: NeuronKind::SoftReset,
        }
    }

    pub fn adaptive(leak: f64, threshold: f64, decay: f64) -> Self {
        Self {
            leak,
            threshold,
            kind: NeuronKind::Adaptive { decay },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            bad.push(format!("leak={} not in (0, 1]", self.leak));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            bad.push(format!("threshold={} not > 0", self.threshold));
        }
        if let NeuronKind::Adaptive { decay } = self.kind {
            if !(0.0..1.0).contains(&decay) {
                bad.push(format!("decay={decay} not in [0, 1)"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Per-neuron state carried between timesteps. `V[0] = 0`, `O[0] = 0`,
/// `k[0] = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState<R = f32> {
    pub v: Tensor<R>,
    pub o: Tensor<R>,
    pub k: Tensor<R>,
}

impl<R: Real> NeuronState<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            v: Tensor::zeros(shape),
            o: Tensor::zeros(shape),
            k: Tensor::zeros(shape),
        }
    }
}

/// One timestep of any neuron variant with a caller-chosen firing function.
/// Returns the next state (with `k` unchanged for non-adaptive neurons).
pub(crate) fn advance<R: Real>(
    cfg: &NeuronConfig,
    prev: &NeuronState<R>,
    input: &Tensor<R>,
    fire: impl Fn(R) -> R,
) -> Result<NeuronState<R>> {
    if input.shape() != prev.v.shape() {
        return Err(Error::dim(
            "neuron_step",
            format!("input {:?} vs state {:?}", input.shape(), prev.v.shape()),
        ));
    }
    if input.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("non-finite input current".into()));
    }
    let lam = R::of(cfg.leak);
    let th = R::of(cfg.threshold);
    let mut next = prev.clone();
    let n = input.len();
    let (vp, op, kp, inp) = (prev.v.data(), prev.o.data(), prev.k.data(), input.data());
    let mut v = vec![R::zero(); n];
    let mut k = kp.to_vec();
    for i in 0..n {
        v[i] = match cfg.kind {
            NeuronKind::HardReset => lam * (R::one() - op[i]) * vp[i] + inp[i],
            NeuronKind::SoftReset => lam * vp[i] + inp[i] - th * op[i],
            NeuronKind::Adaptive { decay } => {
                k[i] = R::of(decay) * kp[i] + op[i];
                lam * vp[i] + inp[i] - th * kp[i]
            }
        };
    }
    let o: Vec<R> = v.iter().map(|&x| fire(x)).collect();
    next.v = Tensor::new(input.shape().to_vec(), v)?.ensure_finite("neuron_step")?;
    next.o = Tensor::new(input.shape().to_vec(), o)?;
    next.k = Tensor::new(input.shape().to_vec(), k)?;
    Ok(next)
}

fn check_kind(cfg: &NeuronConfig, want: &str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{want} step called with {:?} neuron", cfg.kind)))
    }
}

/// Hard-reset LIF step. Returns `(V', O')`.
pub fn step_lif_hard<R: Real>(
    state: &NeuronState<R>,
    input: &Tensor<R>,
    cfg: &NeuronConfig,
) -> Result<(Tensor<R>, Tensor<R>)> {
    check_kind(cfg, "hard-reset", matches!(cfg.kind, NeuronKind::HardReset))?;
    let th = R::of(cfg.threshold);
    let next = advance(cfg, state, input, |v| if v >= th { R::one() } else { R::zero() })?;
    debug_assert_eq!(next.o, heaviside(&next.v, th));
    Ok((next.v, next.o))
}

/// Soft-reset LIF step. Returns `(V', O')`.
pub fn step_lif_soft<R: Real>(
    state: &NeuronState<R>,
    input: &Tensor<R>,
    cfg: &NeuronConfig,
) -> Result<(Tensor<R>, Tensor<R>)> {
    check_kind(cfg, "soft-reset", matches!(cfg.kind, NeuronKind::SoftReset))?;
    let th = R::of(cfg.threshold);
    let next = advance(cfg, state, input, |v| if v >= th { R::one() } else { R::zero() })?;
    Ok((next.v, next.o))
}

/// Adaptive-threshold step. Returns `(V', k', O')`.
pub fn step_adaptive<R: Real>(
    state: &NeuronState<R>,
    input: &Tensor<R>,
    cfg: &NeuronConfig,
) -> Result<(Tensor<R>, Tensor<R>, Tensor<R>)> {
    check_kind(cfg, "adaptive", matches!(cfg.kind, NeuronKind::Adaptive { .. }))?;
    let th = R::of(cfg.threshold);
    let next = advance(cfg, state, input, |v| if v >= th { R::one() } else { R::zero() })?;
    Ok((next.v, next.k, next.o))
}
