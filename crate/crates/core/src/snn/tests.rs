use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_difference_grad, relative_error, softmax_cross_entropy, Tensor};
use crate::surrogate::{SurrogateKind, SurrogateSpec};

fn random_layer(
    rng: &mut ChaCha8Rng,
    inputs: usize,
    outputs: usize,
    scale: f64,
    neuron: NeuronConfig,
    synapse: SynapseConfig,
) -> SpikingLayer<f64> {
    let w = Tensor::from_fn(&[inputs, outputs], |_| rng.gen_range(-scale..scale));
    let b = Tensor::from_fn(&[outputs], |_| rng.gen_range(-0.1..0.3));
    SpikingLayer::new(w, b, neuron, synapse).unwrap()
}

fn small_net(
    rng: &mut ChaCha8Rng,
    neuron: NeuronConfig,
    synapse: SynapseConfig,
    readout: Readout,
    spec: SurrogateSpec,
    steps: usize,
) -> SpikingNet<f64> {
    let mut out_neuron = neuron;
    out_neuron.leak = 0.95;
    let layers = vec![
        random_layer(rng, 6, 5, 1.2, neuron, SynapseConfig::identity()),
        random_layer(rng, 5, 3, 1.2, out_neuron, synapse),
    ];
    SpikingNet::new(layers, steps, readout, spec, vec![6]).unwrap()
}

fn ce_of(net: &SpikingNet<f64>, x: &Tensor<f64>, labels: &[usize]) -> crate::Result<f64> {
    let logits = net.logits(x)?;
    softmax_cross_entropy(&logits, labels).map(|(l, _)| l)
}

#[test]
fn relaxed_forward_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let neurons = [
        NeuronConfig::lif_hard(0.8, 1.0),
        NeuronConfig::lif_soft(0.9, 0.8),
        NeuronConfig::adaptive(0.85, 1.0, 0.4),
    ];
    let synapses = [
        SynapseConfig::identity(),
        SynapseConfig::new(vec![0.5], vec![0.7, 0.3]).unwrap(),
    ];
    let kinds = [SurrogateKind::Sigmoid, SurrogateKind::Arctan, SurrogateKind::Erfc];
    let mut case = 0;
    for neuron in neurons {
        for synapse in &synapses {
            for readout in [Readout::Membrane, Readout::SpikeCount] {
                let kind = kinds[case % kinds.len()];
                case += 1;
                let mut net = small_net(&mut rng, neuron, synapse.clone(), readout, SurrogateSpec::new(kind), 4);
                net.spike_mode = SpikeMode::Relaxed;
                let x = Tensor::<f64>::from_fn(&[2, 6], |_| rng.gen_range(0.0..1.0));
                let labels = [rng.gen_range(0..3), rng.gen_range(0..3)];
                let (logits, trace) = net.forward(&x).unwrap();
                let (_, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();
                let grads = net.backward(&trace, &dlogits).unwrap();

                let fd_x = finite_difference_grad(|z| ce_of(&net, z, &labels), &x, 1e-5).unwrap();
                let err = relative_error(&grads.input, &fd_x);
                assert!(err < 1e-5, "input grad {neuron:?} {readout:?} {kind}: {err}");

                for (l, dw) in grads.weights.iter().enumerate() {
                    let fd_w = finite_difference_grad(
                        |w| {
                            let mut probe = net.clone();
                            probe.layers[l].weights = w.clone();
                            ce_of(&probe, &x, &labels)
                        },
                        &net.layers[l].weights,
                        1e-5,
                    )
                    .unwrap();
                    let err = relative_error(dw, &fd_w);
                    assert!(err < 1e-5, "weight grad layer {l} {neuron:?} {readout:?}: {err}");
                }
                let fd_b = finite_difference_grad(
                    |b| {
                        let mut probe = net.clone();
                        probe.layers[0].bias = b.clone();
                        ce_of(&probe, &x, &labels)
                    },
                    &net.layers[0].bias,
                    1e-5,
                )
                .unwrap();
                assert!(relative_error(&grads.biases[0], &fd_b) < 1e-5);
            }
        }
    }
}

#[test]
fn relaxed_gradients_in_32_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let net64 = small_net(
        &mut rng,
        NeuronConfig::lif_hard(0.9, 1.0),
        SynapseConfig::identity(),
        Readout::Membrane,
        SurrogateSpec::new(SurrogateKind::Arctan),
        4,
    );
    let mut net = net64.cast::<f32>();
    net.spike_mode = SpikeMode::Relaxed;
    let x = Tensor::<f32>::from_fn(&[1, 6], |_| rng.gen_range(0.0..1.0));
    let (logits, trace) = net.forward(&x).unwrap();
    let (_, dlogits) = softmax_cross_entropy(&logits, &[1]).unwrap();
    let grads = net.backward(&trace, &dlogits).unwrap();
    let fd = crate::numerics::finite_difference_grad_f32(
        |z| {
            let l = net.logits(z)?;
            softmax_cross_entropy(&l, &[1]).map(|(v, _)| v)
        },
        &x,
        1e-2,
    )
    .unwrap();
    assert!(relative_error(&grads.input, &fd) < 1e-3);
}

#[test]
fn single_step_gradient_is_chain_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = SurrogateSpec::new(SurrogateKind::Arctan);
    let layer = random_layer(&mut rng, 4, 3, 1.5, NeuronConfig::lif_hard(0.3, 1.0), SynapseConfig::identity());
    let net = SpikingNet::new(vec![layer.clone()], 1, Readout::SpikeCount, spec, vec![4]).unwrap();
    let x = Tensor::<f64>::from_fn(&[1, 4], |_| rng.gen_range(0.0..1.0));
    let (_, trace) = net.forward(&x).unwrap();
    let dlogits = Tensor::<f64>::new(vec![1, 3], vec![0.3, -1.0, 0.5]).unwrap();
    let grads = net.backward(&trace, &dlogits).unwrap();
    // dx_i = Σ_j w_ij · k(V_j) · dlogits_j with V = x·w + b
    let v = trace.layers[0].v[0].data().to_vec();
    for i in 0..4 {
        let want: f64 = (0..3)
            .map(|j| layer.weights.data()[i * 3 + j] * spec.kernel(v[j] - 1.0) * dlogits.data()[j])
            .sum();
        assert!((grads.input.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = small_net(
        &mut rng,
        NeuronConfig::lif_soft(0.9, 1.0),
        SynapseConfig::identity(),
        Readout::Membrane,
        SurrogateSpec::default(),
        5,
    );
    let x = Tensor::<f64>::from_fn(&[3, 6], |_| rng.gen_range(0.0..1.0));
    let (_, trace) = net.forward(&x).unwrap();
    let g = net.backward(&trace, &Tensor::zeros(&[3, 3])).unwrap();
    assert!(g.input.data().iter().all(|&v| v == 0.0));
    assert!(g.weights.iter().chain(&g.biases).all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn single_step_unit_leak_is_thresholded_linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layer = random_layer(&mut rng, 5, 4, 1.5, NeuronConfig::lif_hard(1.0, 1.0), SynapseConfig::identity());
    let net = SpikingNet::new(vec![layer.clone()], 1, Readout::SpikeCount, SurrogateSpec::default(), vec![5]).unwrap();
    let x = Tensor::<f64>::from_fn(&[3, 5], |_| rng.gen_range(0.0..1.0));
    let logits = net.logits(&x).unwrap();
    let lin = x.matmul(&layer.weights).unwrap();
    for r in 0..3 {
        for j in 0..4 {
            let pre = lin.data()[r * 4 + j] + layer.bias.data()[j];
            let want = if pre >= 1.0 { 1.0 } else { 0.0 };
            assert_eq!(logits.data()[r * 4 + j], want);
        }
    }
}

#[test]
fn raising_thresholds_silences_the_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut net = small_net(
        &mut rng,
        NeuronConfig::lif_hard(0.9, 1.0),
        SynapseConfig::identity(),
        Readout::SpikeCount,
        SurrogateSpec::default(),
        6,
    );
    for layer in &mut net.layers {
        layer.neuron.threshold = 1e3;
    }
    let x = Tensor::<f64>::from_fn(&[4, 6], |_| rng.gen_range(0.0..1.0));
    assert!(net.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

/// Independent scalar re-simulation of a hard-reset hidden layer feeding a
/// leaky integrator readout.
fn scalar_oracle(net: &SpikingNet<f64>, x: &[f64]) -> Vec<f64> {
    let (l0, l1) = (&net.layers[0], &net.layers[1]);
    let (n_in, n_hid, n_out) = (l0.inputs(), l0.outputs(), l1.outputs());
    let mut v_h = vec![0.0; n_hid];
    let mut o_h = vec![0.0; n_hid];
    let mut v_o = vec![0.0; n_out];
    for _ in 0..net.timesteps {
        for j in 0..n_hid {
            let mut cur = l0.bias.data()[j];
            for i in 0..n_in {
                cur += x[i] * l0.weights.data()[i * n_hid + j];
            }
            v_h[j] = l0.neuron.leak * (1.0 - o_h[j]) * v_h[j] + cur;
        }
        for j in 0..n_hid {
            o_h[j] = if v_h[j] >= l0.neuron.threshold { 1.0 } else { 0.0 };
        }
        for k in 0..n_out {
            let mut cur = l1.bias.data()[k];
            for j in 0..n_hid {
                cur += o_h[j] * l1.weights.data()[j * n_out + k];
            }
            v_o[k] = l1.neuron.leak * v_o[k] + cur;
        }
    }
    v_o.iter().map(|v| v / net.timesteps as f64).collect()
}

#[test]
fn two_layer_forward_matches_scalar_simulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let net = small_net(
        &mut rng,
        NeuronConfig::lif_hard(0.7, 0.6),
        SynapseConfig::identity(),
        Readout::Membrane,
        SurrogateSpec::default(),
        4,
    );
    let x = Tensor::<f64>::from_fn(&[3, 6], |_| rng.gen_range(0.0..1.0));
    let (logits, trace) = net.forward(&x).unwrap();
    assert!(trace.layers[0].o.iter().flatten_spikes().any(|&o| o == 1.0));
    for r in 0..3 {
        let want = scalar_oracle(&net, x.row(r));
        for (a, b) in logits.row(r).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

trait FlattenSpikes<'a> {
    fn flatten_spikes(self) -> Box<dyn Iterator<Item = &'a f64> + 'a>;
}

impl<'a, I: Iterator<Item = &'a Tensor<f64>> + 'a> FlattenSpikes<'a> for I {
    fn flatten_spikes(self) -> Box<dyn Iterator<Item = &'a f64> + 'a> {
        Box::new(self.flat_map(|t| t.data().iter()))
    }
}

#[test]
fn spikes_are_binary_and_forward_ignores_surrogate() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let base = small_net(
        &mut rng,
        NeuronConfig::adaptive(0.9, 0.7, 0.3),
        SynapseConfig::new(vec![0.3], vec![1.0]).unwrap(),
        Readout::SpikeCount,
        SurrogateSpec::new(SurrogateKind::Sigmoid),
        6,
    );
    let x = Tensor::<f64>::from_fn(&[4, 6], |_| rng.gen_range(0.0..1.0));
    let (ref_logits, ref_trace) = base.forward(&x).unwrap();
    for lt in &ref_trace.layers {
        assert!(lt.o.iter().flatten_spikes().all(|&o| o == 0.0 || o == 1.0));
    }
    for kind in SurrogateKind::ALL {
        let mut net = base.clone();
        net.surrogate = SurrogateSpec::new(kind);
        let (logits, trace) = net.forward(&x).unwrap();
        assert_eq!(logits, ref_logits);
        for (a, b) in trace.layers.iter().zip(&ref_trace.layers) {
            assert_eq!(a.o, b.o);
            assert_eq!(a.v, b.v);
        }
    }
}

#[test]
fn identity_synapse_matches_trivial_iir() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = small_net(
        &mut rng,
        NeuronConfig::lif_soft(0.9, 0.8),
        SynapseConfig::identity(),
        Readout::Membrane,
        SurrogateSpec::default(),
        5,
    );
    // α_1 = 0 routes through the general IIR path while computing X = S
    let mut iir = net.clone();
    for layer in &mut iir.layers {
        layer.synapse = SynapseConfig::new(vec![0.0], vec![1.0]).unwrap();
    }
    let x = Tensor::<f64>::from_fn(&[2, 6], |_| rng.gen_range(0.0..1.0));
    let (a, ta) = net.forward(&x).unwrap();
    let (b, tb) = iir.forward(&x).unwrap();
    assert_eq!(a, b);
    for (la, lb) in ta.layers.iter().zip(&tb.layers) {
        assert_eq!(la.v, lb.v);
        assert_eq!(la.o, lb.o);
    }
    let d = Tensor::<f64>::from_fn(&[2, 3], |_| rng.gen_range(-1.0..1.0));
    let ga = net.backward(&ta, &d).unwrap();
    let gb = iir.backward(&tb, &d).unwrap();
    assert!(ga.input.max_abs_diff(&gb.input).unwrap() < 1e-12);
}

#[test]
fn bptt_is_deterministic() {
    let spec = MlpSpec::new(&[12, 8, 4], 3);
    let net = SpikingNet::<f32>::mlp(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::from_fn(&[5, 12], |_| rng.gen_range(0.0..1.0));
    let run = || {
        let (logits, trace) = net.forward(&x).unwrap();
        let (_, d) = softmax_cross_entropy(&logits, &[0, 1, 2, 3, 0]).unwrap();
        let g = net.backward(&trace, &d).unwrap();
        (logits, g.input, g.weights)
    };
    let (l1, i1, w1) = run();
    let (l2, i2, w2) = run();
    assert_eq!(l1, l2);
    assert_eq!(i1, i2);
    assert_eq!(w1, w2);
}

#[test]
fn hard_reset_leaves_only_fresh_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let layer = random_layer(&mut rng, 3, 6, 2.0, NeuronConfig::lif_hard(0.6, 0.5), SynapseConfig::identity());
    let out = random_layer(&mut rng, 6, 2, 1.0, NeuronConfig::lif_hard(1.0, 1.0), SynapseConfig::identity());
    let net = SpikingNet::new(vec![layer.clone(), out], 6, Readout::Membrane, SurrogateSpec::default(), vec![3]).unwrap();
    let x = Tensor::<f64>::from_fn(&[2, 3], |_| rng.gen_range(0.0..1.0));
    let (_, trace) = net.forward(&x).unwrap();
    let current = x.matmul(&layer.weights).unwrap();
    let lt = &trace.layers[0];
    let mut resets = 0;
    for t in 1..6 {
        for i in 0..lt.v[t].len() {
            if lt.o[t - 1].data()[i] == 1.0 {
                resets += 1;
                let fresh = current.data()[i] + layer.bias.data()[i % 6];
                assert!((lt.v[t].data()[i] - fresh).abs() < 1e-12);
            }
        }
    }
    assert!(resets > 0);
}

#[test]
fn detached_reset_changes_only_the_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let net = small_net(
        &mut rng,
        NeuronConfig::lif_hard(0.9, 0.5),
        SynapseConfig::identity(),
        Readout::Membrane,
        SurrogateSpec::default(),
        6,
    );
    let mut detached = net.clone();
    detached.detach_reset = true;
    let x = Tensor::<f64>::from_fn(&[2, 6], |_| rng.gen_range(0.0..1.0));
    let (la, ta) = net.forward(&x).unwrap();
    let (lb, tb) = detached.forward(&x).unwrap();
    assert_eq!(la, lb);
    let d = Tensor::<f64>::ones(&[2, 3]);
    let ga = net.backward(&ta, &d).unwrap();
    let gb = detached.backward(&tb, &d).unwrap();
    assert!(ga.input.max_abs_diff(&gb.input).unwrap() > 0.0);
}

#[test]
fn errors_for_bad_configs_and_mismatched_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let net = small_net(
        &mut rng,
        NeuronConfig::lif_hard(0.9, 1.0),
        SynapseConfig::identity(),
        Readout::Membrane,
        SurrogateSpec::default(),
        4,
    );
    let x = Tensor::<f64>::ones(&[1, 6]);
    assert_eq!(snn_forward(&net, &x, 0, InputEncoding::Direct).unwrap_err().kind(), "config");
    let (_, trace) = snn_forward(&net, &x, 3, InputEncoding::Direct).unwrap();
    let d = Tensor::<f64>::ones(&[1, 3]);
    // explicit spec, trace length differs from the net's configured T
    assert!(snn_backward(&net, &trace, &d, &SurrogateSpec::default()).is_ok());
    let mut shallow = net.clone();
    shallow.layers.pop();
    shallow.layers[0].weights = Tensor::ones(&[6, 5]);
    assert_eq!(shallow.backward(&trace, &d).unwrap_err().kind(), "state");
    let mut bad_spec = SurrogateSpec::default();
    bad_spec.sigma = -1.0;
    let (_, trace) = net.forward(&x).unwrap();
    assert_eq!(snn_backward(&net, &trace, &d, &bad_spec).unwrap_err().kind(), "config");
    assert_eq!(net.forward(&Tensor::ones(&[1, 5])).unwrap_err().kind(), "dimension");
}
