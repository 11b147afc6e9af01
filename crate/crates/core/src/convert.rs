//! ANN→SNN conversion by layer-wise activation balancing.

use serde::{Deserialize, Serialize};

use crate::ann::{AnnLayer, AnnNet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::snn::{NeuronConfig, Readout, SpikingLayer, SpikingNet, SynapseConfig};
use crate::surrogate::SurrogateSpec;
use crate::train::{evaluate, train_epochs, History, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balance {
    /// Rescale weights so every hidden layer fires at threshold 1.
    #[default]
    WeightBalance,
    /// Keep weights, set each layer's threshold from the scales.
    ThresholdBalance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvertConfig {
    pub balance: Balance,
    /// Percentile of per-sample maximum pre-activations; 100 is strict max.
    pub percentile: f64,
    pub timesteps: usize,
    pub surrogate: SurrogateSpec,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        Self {
            balance: Balance::WeightBalance,
            percentile: 99.9,
            timesteps: 16,
            surrogate: SurrogateSpec::default(),
        }
    }
}

/// Linearly interpolated percentile of `values` (`p` in `[0, 100]`).
pub fn percentile(values: &[f32], p: f64) -> f32 {
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = (pos - lo as f64) as f32;
    v[lo] + (v[hi] - v[lo]) * frac
}

/// Dense layers of a ReLU MLP, each with whether a ReLU follows.
fn dense_stack(ann: &AnnNet) -> Result<Vec<(&Tensor, &Tensor)>> {
    let mut out = Vec::new();
    let mut expect_relu = false;
    for layer in &ann.layers {
        match layer {
            AnnLayer::Dense { weights, bias } => {
                if expect_relu {
                    return Err(Error::Unsupported(
                        "conversion needs a ReLU between consecutive dense layers".into(),
                    ));
                }
                out.push((weights, bias));
                expect_relu = true;
            }
            AnnLayer::Relu if expect_relu => expect_relu = false,
            AnnLayer::Relu => {
                return Err(Error::Unsupported("ReLU without a preceding dense layer".into()));
            }
            AnnLayer::Flatten => {}
            other => {
                return Err(Error::Unsupported(format!(
                    "cannot convert a {} layer; only dense/ReLU/flatten networks convert",
                    other.name()
                )));
            }
        }
    }
    if !expect_relu {
        return Err(Error::Unsupported("the last layer must be dense logits without ReLU".into()));
    }
    Ok(out)
}

/// Per hidden layer, the `percentile` of per-sample maximum pre-activations
/// over `calib`, clamped to 1 when not positive.
pub fn activation_scales(ann: &AnnNet, calib: &Tensor, percentile_p: f64) -> Result<Vec<f32>> {
    if !(0.0..=100.0).contains(&percentile_p) {
        return Err(Error::Config(format!("percentile {percentile_p} not in [0, 100]")));
    }
    let layers = dense_stack(ann)?;
    let mut h = calib.clone().flatten_rows();
    let mut scales = Vec::with_capacity(layers.len() - 1);
    for (w, b) in &layers[..layers.len() - 1] {
        let mut z = h.matmul(w)?;
        let width = b.len();
        for row in z.data_mut().chunks_mut(width) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let maxima: Vec<f32> = (0..z.rows())
            .map(|r| z.row(r).iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect();
        let s = percentile(&maxima, percentile_p);
        scales.push(if s > 0.0 && s.is_finite() { s } else { 1.0 });
        h = z.map(|v| v.max(0.0));
    }
    Ok(scales)
}

/// Mirror a dense/ReLU network as soft-reset IF neurons (λ = 1) with a
/// membrane readout. Scales come from `calib` (in the order given).
pub fn convert_ann_to_snn(ann: &AnnNet, calib: &Tensor, cfg: &ConvertConfig) -> Result<SpikingNet> {
    if calib.rank() < 2 {
        return Err(Error::Input("calibration batch is empty".into()));
    }
    let layers = dense_stack(ann)?;
    let scales = activation_scales(ann, calib, cfg.percentile)?;
    let depth = layers.len();
    let mut out = Vec::with_capacity(depth);
    for (l, (w, b)) in layers.iter().enumerate() {
        let prev = if l == 0 { 1.0 } else { scales[l - 1] };
        let last = l + 1 == depth;
        let (weights, bias, threshold) = match (cfg.balance, last) {
            (Balance::WeightBalance, false) => (w.scale(prev / scales[l])?, b.scale(1.0 / scales[l])?, 1.0),
            (Balance::WeightBalance, true) => (w.scale(prev)?, (*b).clone(), 1.0),
            (Balance::ThresholdBalance, false) => {
                ((*w).clone(), b.scale(1.0 / prev)?, f64::from(scales[l] / prev))
            }
            (Balance::ThresholdBalance, true) => ((*w).clone(), b.scale(1.0 / prev)?, 1.0),
        };
        out.push(SpikingLayer::new(
            weights,
            bias,
            NeuronConfig::lif_soft(1.0, threshold),
            SynapseConfig::identity(),
        )?);
    }
    SpikingNet::new(
        out,
        cfg.timesteps,
        Readout::Membrane,
        cfg.surrogate,
        ann.input_shape.clone(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// `accuracy_after − accuracy_before`.
    pub recovery: f64,
    pub history: History,
}

/// Surrogate-gradient retraining starting from converted weights. Accuracy
/// is measured on `eval` (or `data` when `None`) before and after.
pub fn fine_tune(
    snn: &mut SpikingNet,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<FineTuneReport> {
    let eval = eval.unwrap_or(data);
    let accuracy_before = evaluate(&*snn, eval)?.accuracy;
    let history = train_epochs(snn, data, None, cfg, |_| {})?;
    let accuracy_after = evaluate(&*snn, eval)?.accuracy;
    Ok(FineTuneReport {
        accuracy_before,
        accuracy_after,
        recovery: accuracy_after - accuracy_before,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::snn::SnnTrace;
    use crate::train::Optimizer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hidden_rates(trace: &SnnTrace) -> Tensor {
        let t = trace.timesteps as f32;
        let o = &trace.layers[0].o;
        let mut acc = Tensor::zeros(o[0].shape());
        for step in o {
            acc.add_scaled_assign(step, 1.0 / t).unwrap();
        }
        acc
    }

    fn random_mlp(sizes: &[usize], seed: u64) -> AnnNet {
        AnnNet::mlp(sizes, &[sizes[0]], seed).unwrap()
    }

    #[test]
    fn rate_tracks_scaled_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ann = random_mlp(&[6, 5, 3], 2);
        let x = Tensor::from_fn(&[20, 6], |_| rng.gen_range(0.0..1.0));
        let cfg = ConvertConfig {
            percentile: 100.0,
            timesteps: 64,
            ..ConvertConfig::default()
        };
        let m = activation_scales(&ann, &x, 100.0).unwrap()[0];
        for balance in [Balance::WeightBalance, Balance::ThresholdBalance] {
            let snn = convert_ann_to_snn(&ann, &x, &ConvertConfig { balance, ..cfg.clone() }).unwrap();
            let (_, trace) = snn.forward(&x).unwrap();
            let rates = hidden_rates(&trace);
            let AnnLayer::Dense { weights, bias } = &ann.layers[0] else { unreachable!() };
            let mut z = x.matmul(weights).unwrap();
            for row in z.data_mut().chunks_mut(5) {
                for (v, b) in row.iter_mut().zip(bias.data()) {
                    *v += b;
                }
            }
            for (r, zi) in rates.data().iter().zip(z.data()) {
                let want = zi.max(0.0) / m;
                assert!((r - want).abs() <= 2.0 / 64.0, "{balance:?}: rate {r} vs {want}");
            }
        }
    }

    #[test]
    fn rate_error_shrinks_with_timesteps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ann = random_mlp(&[8, 6, 2], 4);
        let x = Tensor::from_fn(&[30, 8], |_| rng.gen_range(0.0..1.0));
        let m = activation_scales(&ann, &x, 100.0).unwrap()[0];
        let AnnLayer::Dense { weights, bias } = &ann.layers[0] else { unreachable!() };
        let mut z = x.matmul(weights).unwrap();
        for row in z.data_mut().chunks_mut(6) {
            for (v, b) in row.iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
        let mut last = f32::INFINITY;
        for t in [16, 32, 64, 128] {
            let cfg = ConvertConfig {
                percentile: 100.0,
                timesteps: t,
                ..ConvertConfig::default()
            };
            let snn = convert_ann_to_snn(&ann, &x, &cfg).unwrap();
            let rates = hidden_rates(&snn.forward(&x).unwrap().1);
            let err: f32 = rates
                .data()
                .iter()
                .zip(z.data())
                .map(|(r, zi)| (r - zi.max(0.0) / m).abs())
                .sum::<f32>()
                / rates.len() as f32;
            assert!(err < last, "T={t}: {err} !< {last}");
            last = err;
        }
    }

    #[test]
    fn zero_activations_clamp_scale_to_one() {
        let ann = AnnNet::new(
            vec![
                AnnLayer::Dense {
                    weights: Tensor::zeros(&[3, 2]),
                    bias: Tensor::zeros(&[2]),
                },
                AnnLayer::Relu,
                AnnLayer::Dense {
                    weights: Tensor::ones(&[2, 2]),
                    bias: Tensor::zeros(&[2]),
                },
            ],
            vec![3],
        )
        .unwrap();
        let calib = Tensor::ones(&[4, 3]);
        assert_eq!(activation_scales(&ann, &calib, 99.9).unwrap(), vec![1.0]);
    }

    #[test]
    fn identity_weights_single_sample_scale() {
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let ann = AnnNet::new(
            vec![
                AnnLayer::Dense {
                    weights: eye.clone(),
                    bias: Tensor::zeros(&[3]),
                },
                AnnLayer::Relu,
                AnnLayer::Dense {
                    weights: eye,
                    bias: Tensor::zeros(&[3]),
                },
            ],
            vec![3],
        )
        .unwrap();
        let calib = Tensor::new(vec![1, 3], vec![0.2, 0.7, 0.4]).unwrap();
        for p in [50.0, 99.9, 100.0] {
            assert_eq!(activation_scales(&ann, &calib, p).unwrap(), vec![0.7]);
        }
    }

    #[test]
    fn conversion_preserves_shapes_up_to_scalars() {
        let ann = random_mlp(&[5, 4, 4, 3], 6);
        let x = synth_blobs(40, 2, 5, 1).unwrap().images;
        let snn = convert_ann_to_snn(&ann, &x, &ConvertConfig::default()).unwrap();
        let dense: Vec<&Tensor> = ann.parameters().into_iter().step_by(2).collect();
        for (layer, w) in snn.layers.iter().zip(dense) {
            assert_eq!(layer.weights.shape(), w.shape());
            assert_eq!(layer.neuron, NeuronConfig::lif_soft(1.0, 1.0));
            // one common factor per layer
            let ratio = layer.weights.data()[0] / w.data()[0];
            for (a, b) in layer.weights.data().iter().zip(w.data()) {
                assert!((a - ratio * b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn non_relu_networks_are_unsupported() {
        let cnn = AnnNet::small_cnn(&[1, 4, 4], 2, 0).unwrap();
        let calib = Tensor::zeros(&[1, 1, 4, 4]);
        let err = convert_ann_to_snn(&cnn, &calib, &ConvertConfig::default()).unwrap_err();
        assert_eq!(err.kind(), "unsupported");
        let linear = AnnNet::new(
            vec![
                AnnLayer::Dense {
                    weights: Tensor::zeros(&[2, 2]),
                    bias: Tensor::zeros(&[2]),
                },
                AnnLayer::Dense {
                    weights: Tensor::zeros(&[2, 2]),
                    bias: Tensor::zeros(&[2]),
                },
            ],
            vec![2],
        )
        .unwrap();
        let err = convert_ann_to_snn(&linear, &Tensor::zeros(&[1, 2]), &ConvertConfig::default()).unwrap_err();
        assert_eq!(err.kind(), "unsupported");
    }

    #[test]
    fn zero_epoch_fine_tune_is_identity() {
        let data = synth_blobs(40, 2, 4, 3).unwrap();
        let ann = random_mlp(&[4, 6, 2], 1);
        let mut snn = convert_ann_to_snn(&ann, &data.images, &ConvertConfig::default()).unwrap();
        let before = snn.clone();
        let report = fine_tune(&mut snn, &data, None, &TrainConfig::new(Optimizer::adam(1e-3), 0, 0)).unwrap();
        assert_eq!(snn, before);
        assert_eq!(report.recovery, 0.0);
    }

    #[test]
    fn converted_blob_classifier_keeps_accuracy() {
        let data = synth_blobs(200, 4, 8, 5).unwrap();
        let mut ann = random_mlp(&[8, 16, 4], 3);
        let mut cfg = TrainConfig::new(Optimizer::sgd(0.1, 0.9), 20, 1);
        cfg.batch_size = 16;
        train_epochs(&mut ann, &data, None, &cfg, |_| {}).unwrap();
        let ann_acc = evaluate(&ann, &data).unwrap().accuracy;
        let mut snn = convert_ann_to_snn(&ann, &data.images, &ConvertConfig::default()).unwrap();
        let report = fine_tune(&mut snn, &data, None, &TrainConfig::new(Optimizer::adam(1e-3), 1, 2)).unwrap();
        assert!(report.accuracy_before >= ann_acc - 0.03, "{} vs {ann_acc}", report.accuracy_before);
        assert!(report.accuracy_after >= report.accuracy_before - 0.01);
    }
}
