//! Surrogate derivatives for the Heaviside spike nonlinearity.
//!
//! The forward pass always fires with the exact step `u(v − ϑ)`; a
//! [`SurrogateSpec`] only decides which smooth kernel stands in for `u'`
//! during backpropagation. Every kernel is written in terms of the offset
//! `d = v − ϑ`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateKind {
    Sigmoid,
    Erfc,
    Arctan,
    PiecewiseLinear,
    FastSigmoid,
    PiecewiseExp,
    Rectangular,
}

impl SurrogateKind {
    pub const ALL: [SurrogateKind; 7] = [
        SurrogateKind::Sigmoid,
        SurrogateKind::Erfc,
        SurrogateKind::Arctan,
        SurrogateKind::PiecewiseLinear,
        SurrogateKind::FastSigmoid,
        SurrogateKind::PiecewiseExp,
        SurrogateKind::Rectangular,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SurrogateKind::Sigmoid => "sigmoid",
            SurrogateKind::Erfc => "erfc",
            SurrogateKind::Arctan => "arctan",
            SurrogateKind::PiecewiseLinear => "piecewiselinear",
            SurrogateKind::FastSigmoid => "fastsigmoid",
            SurrogateKind::PiecewiseExp => "piecewiseexp",
            SurrogateKind::Rectangular => "rectangular",
        }
    }
}

impl fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SurrogateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "sigmoid" | "ste" => SurrogateKind::Sigmoid,
            "erfc" => SurrogateKind::Erfc,
            "arctan" | "atan" => SurrogateKind::Arctan,
            "piecewiselinear" | "pwl" | "linear" => SurrogateKind::PiecewiseLinear,
            "fastsigmoid" => SurrogateKind::FastSigmoid,
            "piecewiseexp" | "pwe" => SurrogateKind::PiecewiseExp,
            "rectangular" | "rect" | "actfun" => SurrogateKind::Rectangular,
            _ => return Err(Error::Config(format!("unknown surrogate kind '{s}'"))),
        })
    }
}

/// Which printed form of the piecewise-exponential kernel to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PweForm {
    /// `α·e^{−β|d|}`, a decaying escape-rate density.
    #[default]
    Decaying,
    /// `1 / (α·e^{−β|d|})`, grows without bound away from threshold.
    Reciprocal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FastSigmoidForm {
    /// `1 / (1 + (1 + |d|)²)`.
    #[default]
    Literal,
    /// `1 / (1 + |d|)²`.
    Conventional,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub threshold: f64,
    /// Erfc width.
    pub sigma: f64,
    /// Piecewise-exponential scale.
    pub alpha: f64,
    /// Piecewise-exponential decay.
    pub beta: f64,
    /// Rectangular width (height is its reciprocal).
    pub rect_alpha: f64,
    pub pwe_form: PweForm,
    pub fast_sigmoid_form: FastSigmoidForm,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self::new(SurrogateKind::Arctan)
    }
}

impl SurrogateSpec {
    pub fn new(kind: SurrogateKind) -> Self {
        Self {
            kind,
            threshold: 1.0,
            sigma: 0.4,
            alpha: 1.0,
            beta: 5.0,
            rect_alpha: 1.0,
            pwe_form: PweForm::Decaying,
            fast_sigmoid_form: FastSigmoidForm::Literal,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("threshold", self.threshold),
            ("sigma", self.sigma),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("rect_alpha", self.rect_alpha),
        ];
        let bad: Vec<String> = fields
            .iter()
            .filter(|(_, v)| !(v.is_finite() && *v > 0.0))
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "surrogate hyperparameters must be finite and > 0: {}",
                bad.join(", ")
            )))
        }
    }

    /// Kernel value at offset `d = v − ϑ`.
    pub fn kernel(&self, d: f64) -> f64 {
        let a = d.abs();
        match self.kind {
            SurrogateKind::Sigmoid => {
                // e^{-d}/(1+e^{-d})² written via |d| to avoid overflow
                let e = (-a).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            SurrogateKind::Erfc => {
                (-(d * d) / (2.0 * self.sigma * self.sigma)).exp() / ((2.0 * PI).sqrt() * self.sigma)
            }
            SurrogateKind::Arctan => 1.0 / (1.0 + PI * PI * d * d),
            SurrogateKind::PiecewiseLinear => (1.0 - a).max(0.0),
            SurrogateKind::FastSigmoid => match self.fast_sigmoid_form {
                FastSigmoidForm::Literal => 1.0 / (1.0 + (1.0 + a) * (1.0 + a)),
                FastSigmoidForm::Conventional => 1.0 / ((1.0 + a) * (1.0 + a)),
            },
            SurrogateKind::PiecewiseExp => match self.pwe_form {
                PweForm::Decaying => self.alpha * (-self.beta * a).exp(),
                // capped so the kernel stays finite for any finite input
                PweForm::Reciprocal => ((self.beta * a).min(700.0)).exp() / self.alpha,
            },
            SurrogateKind::Rectangular => {
                if a < self.rect_alpha / 2.0 {
                    1.0 / self.rect_alpha
                } else {
                    0.0
                }
            }
        }
    }

    /// A smooth step whose derivative is exactly [`kernel`](Self::kernel).
    /// Used by the relaxed forward mode that the BPTT oracle checks against.
    pub fn relaxed_step(&self, d: f64) -> f64 {
        let a = d.abs();
        let s = d.signum();
        match self.kind {
            SurrogateKind::Sigmoid => {
                if d >= 0.0 {
                    1.0 / (1.0 + (-d).exp())
                } else {
                    let e = d.exp();
                    e / (1.0 + e)
                }
            }
            SurrogateKind::Erfc => 0.5 * libm::erfc(-d / (self.sigma * std::f64::consts::SQRT_2)),
            SurrogateKind::Arctan => 0.5 + (PI * d).atan() / PI,
            SurrogateKind::PiecewiseLinear => {
                if d <= -1.0 {
                    0.0
                } else if d < 0.0 {
                    0.5 * (1.0 + d) * (1.0 + d)
                } else if d < 1.0 {
                    1.0 - 0.5 * (1.0 - d) * (1.0 - d)
                } else {
                    1.0
                }
            }
            SurrogateKind::FastSigmoid => match self.fast_sigmoid_form {
                FastSigmoidForm::Literal => 0.5 + s * ((1.0 + a).atan() - PI / 4.0),
                FastSigmoidForm::Conventional => 0.5 + s * a / (1.0 + a),
            },
            SurrogateKind::PiecewiseExp => match self.pwe_form {
                PweForm::Decaying => {
                    0.5 + s * self.alpha / self.beta * (1.0 - (-self.beta * a).exp())
                }
                PweForm::Reciprocal => {
                    0.5 + s * (((self.beta * a).min(700.0)).exp() - 1.0) / (self.alpha * self.beta)
                }
            },
            SurrogateKind::Rectangular => {
                ((d + self.rect_alpha / 2.0) / self.rect_alpha).clamp(0.0, 1.0)
            }
        }
    }

    /// Kernel value at membrane potential `v` for a neuron with the given
    /// threshold (layers may carry their own balanced thresholds).
    pub fn grad_at<R: Real>(&self, v: R, threshold: R) -> R {
        R::of(self.kernel((v - threshold).as_f64()))
    }

    pub fn relaxed_at<R: Real>(&self, v: R, threshold: R) -> R {
        R::of(self.relaxed_step((v - threshold).as_f64()))
    }
}

/// Spike nonlinearity: 1 where `v ≥ ϑ`, else 0.
pub fn heaviside<R: Real>(v: &Tensor<R>, threshold: R) -> Tensor<R> {
    v.map(|x| if x >= threshold { R::one() } else { R::zero() })
}

/// Elementwise surrogate derivative centred on `spec.threshold`.
pub fn surrogate_grad<R: Real>(spec: &SurrogateSpec, v: &Tensor<R>) -> Tensor<R> {
    let th = R::of(spec.threshold);
    v.map(|x| spec.grad_at(x, th))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(spec: &SurrogateSpec, n: usize, half_width: f64) -> Vec<(f64, f64)> {
        (0..=n)
            .map(|i| {
                let v = spec.threshold - half_width + 2.0 * half_width * i as f64 / n as f64;
                (v, spec.kernel(v - spec.threshold))
            })
            .collect()
    }

    #[test]
    fn heaviside_boundary_inclusive() {
        let v = Tensor::<f64>::new(vec![3], vec![0.5, 1.0, 1.5]).unwrap();
        assert_eq!(heaviside(&v, 1.0).data(), &[0.0, 1.0, 1.0]);
        let at = Tensor::<f32>::full(&[4], 0.7);
        assert!(heaviside(&at, 0.7).data().iter().all(|&o| o == 1.0));
    }

    #[test]
    fn heaviside_binary_and_monotone_on_grid() {
        let v = Tensor::<f64>::from_fn(&[2001], |i| -5.0 + i as f64 * 0.005);
        let o = heaviside(&v, 0.37);
        assert!(o.data().iter().all(|&x| x == 0.0 || x == 1.0));
        assert!(o.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn peak_values() {
        assert_eq!(SurrogateSpec::new(SurrogateKind::Sigmoid).kernel(0.0), 0.25);
        assert_eq!(SurrogateSpec::new(SurrogateKind::Arctan).kernel(0.0), 1.0);
        let mut erfc = SurrogateSpec::new(SurrogateKind::Erfc);
        erfc.sigma = 1.0;
        assert!((erfc.kernel(0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn surrogate_grad_centres_on_threshold() {
        let spec = SurrogateSpec::new(SurrogateKind::Sigmoid).with_threshold(2.0);
        let v = Tensor::<f32>::new(vec![1], vec![2.0]).unwrap();
        assert_eq!(surrogate_grad(&spec, &v).data(), &[0.25]);
    }

    #[test]
    fn rectangular_is_a_unit_box() {
        let spec = SurrogateSpec::new(SurrogateKind::Rectangular);
        assert_eq!(spec.kernel(0.49), 1.0);
        assert_eq!(spec.kernel(-0.49), 1.0);
        assert_eq!(spec.kernel(0.51), 0.0);
        // midpoint rule quadrature over [−2, 2]
        let n = 400_000;
        let h = 4.0 / n as f64;
        let integral: f64 = (0..n).map(|i| spec.kernel(-2.0 + (i as f64 + 0.5) * h) * h).sum();
        assert!((integral - 1.0).abs() < 1e-4, "{integral}");
    }

    #[test]
    fn kernel_shape_properties() {
        for kind in SurrogateKind::ALL {
            let spec = SurrogateSpec::new(kind);
            let pts = grid(&spec, 10_000, 4.0);
            let peak = spec.kernel(0.0);
            for &(v, k) in &pts {
                assert!(k >= 0.0 && k.is_finite(), "{kind} at {v}");
                assert!(k <= peak, "{kind}: peak not at threshold ({v})");
                let d = v - spec.threshold;
                assert_eq!(spec.kernel(d), spec.kernel(-d), "{kind} asymmetric at {d}");
            }
        }
    }

    #[test]
    fn non_plateau_kernels_decay_monotonically() {
        for kind in [
            SurrogateKind::Sigmoid,
            SurrogateKind::Erfc,
            SurrogateKind::Arctan,
            SurrogateKind::FastSigmoid,
            SurrogateKind::PiecewiseExp,
        ] {
            let spec = SurrogateSpec::new(kind);
            let mut prev = spec.kernel(0.0);
            for i in 1..5000 {
                let k = spec.kernel(i as f64 * 1e-3);
                assert!(k <= prev, "{kind} increases at {}", i as f64 * 1e-3);
                prev = k;
            }
        }
    }

    #[test]
    fn relaxed_step_derivative_is_the_kernel() {
        let mut variants: Vec<SurrogateSpec> =
            SurrogateKind::ALL.iter().map(|&k| SurrogateSpec::new(k)).collect();
        let mut conv = SurrogateSpec::new(SurrogateKind::FastSigmoid);
        conv.fast_sigmoid_form = FastSigmoidForm::Conventional;
        let mut recip = SurrogateSpec::new(SurrogateKind::PiecewiseExp);
        recip.pwe_form = PweForm::Reciprocal;
        variants.push(conv);
        variants.push(recip);
        let h = 1e-6;
        for spec in variants {
            for i in 0..200 {
                let d = -1.9 + i as f64 * 0.0191 + 0.0013;
                // skip kinks of the piecewise kernels
                if [0.0, 1.0, -1.0, 0.5, -0.5].iter().any(|&k| (d - k).abs() < 10.0 * h) {
                    continue;
                }
                let fd = (spec.relaxed_step(d + h) - spec.relaxed_step(d - h)) / (2.0 * h);
                let k = spec.kernel(d);
                assert!((fd - k).abs() <= 1e-6 * (1.0 + k.abs()), "{:?} d={d}: {fd} vs {k}", spec.kind);
            }
        }
    }

    #[test]
    fn names_round_trip_and_aliases() {
        for kind in SurrogateKind::ALL {
            assert_eq!(kind.name().parse::<SurrogateKind>().unwrap(), kind);
        }
        assert_eq!("ActFun".parse::<SurrogateKind>().unwrap(), SurrogateKind::Rectangular);
        assert_eq!("piecewise-exp".parse::<SurrogateKind>().unwrap(), SurrogateKind::PiecewiseExp);
        assert!("relu".parse::<SurrogateKind>().is_err());
    }

    #[test]
    fn validation_lists_every_bad_field() {
        let mut spec = SurrogateSpec::new(SurrogateKind::Erfc);
        spec.sigma = 0.0;
        spec.beta = -1.0;
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("sigma=0") && msg.contains("beta=-1"));
    }

    #[test]
    fn reciprocal_pwe_stays_finite() {
        let mut spec = SurrogateSpec::new(SurrogateKind::PiecewiseExp);
        spec.pwe_form = PweForm::Reciprocal;
        assert!(spec.kernel(1e6).is_finite());
    }
}
