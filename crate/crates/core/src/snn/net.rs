use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::init::kaiming_uniform;
use crate::numerics::{Real, Tensor};
use crate::snn::neuron::{advance, NeuronConfig, NeuronKind, NeuronState};
use crate::snn::synapse::{synapse_backward, synapse_iir, SynapseConfig};
use crate::surrogate::SurrogateSpec;

/// How the last layer is turned into logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Last layer is a non-spiking leaky integrator; logits are `V[T] / T`.
    #[default]
    Membrane,
    /// Last layer spikes; logits are spike counts divided by `T`.
    SpikeCount,
}

/// Forward firing function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeMode {
    /// Binary spikes from the Heaviside step.
    #[default]
    Heaviside,
    /// Spikes replaced by the surrogate's antiderivative, so the backward
    /// pass is the exact gradient. Only used for gradient checking.
    Relaxed,
}

/// Input encoding. Pixels are presented as a constant current at every
/// timestep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[non_exhaustive]
pub enum InputEncoding {
    #[default]
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikingLayer<R = f32> {
    /// `[inputs, outputs]`
    pub weights: Tensor<R>,
    /// `[outputs]`
    pub bias: Tensor<R>,
    pub neuron: NeuronConfig,
    pub synapse: SynapseConfig,
}

impl<R: Real> SpikingLayer<R> {
    pub fn new(
        weights: Tensor<R>,
        bias: Tensor<R>,
        neuron: NeuronConfig,
        synapse: SynapseConfig,
    ) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::dim("spiking_layer", format!("weights {:?}", weights.shape())));
        }
        if bias.shape() != [weights.shape()[1]] {
            return Err(Error::dim(
                "spiking_layer",
                format!("bias {:?} for weights {:?}", bias.shape(), weights.shape()),
            ));
        }
        neuron.validate()?;
        Ok(Self {
            weights,
            bias,
            neuron,
            synapse,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }

    fn current(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        let mut i = x.matmul(&self.weights)?;
        let out = self.outputs();
        let b = self.bias.data();
        for row in i.data_mut().chunks_mut(out) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(i)
    }
}

/// Recorded state of one layer for `t = 1..=T`.
#[derive(Clone, Debug)]
pub struct LayerTrace<R = f32> {
    /// Synaptic state `X[t]`. Holds a single entry when the layer sees a
    /// time-constant input through an identity synapse.
    pub synaptic: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub k: Vec<Tensor<R>>,
    pub o: Vec<Tensor<R>>,
}

impl<R: Real> LayerTrace<R> {
    fn new() -> Self {
        Self {
            synaptic: Vec::new(),
            v: Vec::new(),
            k: Vec::new(),
            o: Vec::new(),
        }
    }

    pub fn is_static(&self) -> bool {
        self.synaptic.len() == 1 && self.v.len() > 1
    }
}

#[derive(Clone, Debug)]
pub struct SnnTrace<R = f32> {
    pub layers: Vec<LayerTrace<R>>,
    pub timesteps: usize,
    input_shape: Vec<usize>,
}

impl<R: Real> SnnTrace<R> {
    pub fn batch(&self) -> usize {
        self.input_shape[0]
    }
}

#[derive(Clone, Debug)]
pub struct SnnGrads<R = f32> {
    pub weights: Vec<Tensor<R>>,
    pub biases: Vec<Tensor<R>>,
    pub input: Tensor<R>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikingNet<R = f32> {
    pub layers: Vec<SpikingLayer<R>>,
    pub timesteps: usize,
    pub readout: Readout,
    /// Kernel used for `∂O/∂V` in the backward pass.
    pub surrogate: SurrogateSpec,
    pub spike_mode: SpikeMode,
    /// Stop gradients through the reset/inhibition path (ablation only).
    pub detach_reset: bool,
    /// Per-sample input shape, e.g. `[1, 28, 28]` or `[784]`.
    pub input_shape: Vec<usize>,
}

/// Hyperparameters for [`SpikingNet::mlp`].
#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub input_shape: Vec<usize>,
    pub hidden_neuron: NeuronConfig,
    pub output_leak: f64,
    pub timesteps: usize,
    pub surrogate: SurrogateSpec,
    pub init_gain: f64,
    pub seed: u64,
}

impl MlpSpec {
    /// Hard-reset LIF MLP with membrane readout; `T = 8`, arctan surrogate.
    pub fn new(sizes: &[usize], seed: u64) -> Self {
        Self {
            sizes: sizes.to_vec(),
            input_shape: vec![sizes[0]],
            hidden_neuron: NeuronConfig::lif_hard(0.9, 1.0),
            output_leak: 1.0,
            timesteps: 8,
            surrogate: SurrogateSpec::default(),
            init_gain: 2.0_f64.sqrt(),
            seed,
        }
    }
}

impl<R: Real> SpikingNet<R> {
    pub fn new(
        layers: Vec<SpikingLayer<R>>,
        timesteps: usize,
        readout: Readout,
        surrogate: SurrogateSpec,
        input_shape: Vec<usize>,
    ) -> Result<Self> {
        let net = Self {
            layers,
            timesteps,
            readout,
            surrogate,
            spike_mode: SpikeMode::Heaviside,
            detach_reset: false,
            input_shape,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn mlp(spec: &MlpSpec) -> Result<Self> {
        if spec.sizes.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::new();
        let depth = spec.sizes.len() - 1;
        for (l, pair) in spec.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = kaiming_uniform(&[fan_in, fan_out], fan_in, spec.init_gain, &mut rng);
            let neuron = if l + 1 == depth {
                NeuronConfig {
                    leak: spec.output_leak,
                    ..spec.hidden_neuron
                }
            } else {
                spec.hidden_neuron
            };
            layers.push(SpikingLayer::new(
                w,
                Tensor::zeros(&[fan_out]),
                neuron,
                SynapseConfig::identity(),
            )?);
        }
        Self::new(
            layers,
            spec.timesteps,
            Readout::Membrane,
            spec.surrogate,
            spec.input_shape.clone(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be >= 1".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("spiking net has no layers".into()));
        }
        self.surrogate.validate()?;
        let width: usize = self.input_shape.iter().product();
        if width != self.layers[0].inputs() {
            return Err(Error::dim(
                "spiking_net",
                format!("input shape {:?} vs first layer width {}", self.input_shape, self.layers[0].inputs()),
            ));
        }
        for pair in self.layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::dim(
                    "spiking_net",
                    format!("layer widths {} -> {}", pair[0].outputs(), pair[1].inputs()),
                ));
            }
        }
        for layer in &self.layers {
            layer.neuron.validate()?;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.outputs()).unwrap_or(0)
    }

    pub fn cast<S: Real>(&self) -> SpikingNet<S> {
        SpikingNet {
            layers: self
                .layers
                .iter()
                .map(|l| SpikingLayer {
                    weights: l.weights.cast(),
                    bias: l.bias.cast(),
                    neuron: l.neuron,
                    synapse: l.synapse.clone(),
                })
                .collect(),
            timesteps: self.timesteps,
            readout: self.readout,
            surrogate: self.surrogate,
            spike_mode: self.spike_mode,
            detach_reset: self.detach_reset,
            input_shape: self.input_shape.clone(),
        }
    }

    fn is_integrator(&self, l: usize) -> bool {
        self.readout == Readout::Membrane && l + 1 == self.layers.len()
    }

    fn flatten_input(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        let width = self.layers[0].inputs();
        if x.rank() < 2 || x.row_len() != width {
            return Err(Error::dim(
                "snn_forward",
                format!("input {:?} for first layer width {width}", x.shape()),
            ));
        }
        Ok(x.clone().flatten_rows())
    }

    pub fn logits(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        self.forward(x).map(|(logits, _)| logits)
    }

    /// Unrolled simulation over `T` steps. Returns logits and the full trace.
    pub fn forward(&self, x: &Tensor<R>) -> Result<(Tensor<R>, SnnTrace<R>)> {
        self.validate()?;
        let x2 = self.flatten_input(x)?;
        let n = x2.rows();
        let steps = self.timesteps;
        let mut traces: Vec<LayerTrace<R>> = self.layers.iter().map(|_| LayerTrace::new()).collect();
        let mut states: Vec<NeuronState<R>> = self
            .layers
            .iter()
            .map(|l| NeuronState::zeros(&[n, l.outputs()]))
            .collect();
        // presynaptic history, kept only for stateful synapses
        let mut spike_hist: Vec<Vec<Tensor<R>>> = self.layers.iter().map(|_| Vec::new()).collect();
        let static_first = self.layers[0].synapse.is_identity();
        let first_current = if static_first {
            traces[0].synaptic.push(x2.clone());
            Some(self.layers[0].current(&x2)?)
        } else {
            None
        };

        for _t in 0..steps {
            let mut input = x2.clone();
            for (l, layer) in self.layers.iter().enumerate() {
                let current = if l == 0 && static_first {
                    first_current.clone().expect("static current computed")
                } else {
                    let syn = if layer.synapse.is_identity() {
                        input
                    } else {
                        spike_hist[l].push(input);
                        synapse_iir(&layer.synapse, &spike_hist[l], &traces[l].synaptic)?
                    };
                    let c = layer.current(&syn)?;
                    traces[l].synaptic.push(syn);
                    c
                };
                let th = R::of(layer.neuron.threshold);
                let spec = self.surrogate;
                let next = if self.is_integrator(l) {
                    let lam = R::of(layer.neuron.leak);
                    let mut st = states[l].clone();
                    st.v = st.v.scale(lam)?.add(&current)?;
                    st
                } else {
                    match self.spike_mode {
                        SpikeMode::Heaviside => advance(&layer.neuron, &states[l], &current, |v| {
                            if v >= th {
                                R::one()
                            } else {
                                R::zero()
                            }
                        })?,
                        SpikeMode::Relaxed => {
                            advance(&layer.neuron, &states[l], &current, |v| spec.relaxed_at(v, th))?
                        }
                    }
                };
                traces[l].v.push(next.v.clone());
                traces[l].o.push(next.o.clone());
                traces[l].k.push(next.k.clone());
                input = next.o.clone();
                states[l] = next;
            }
        }

        let inv_t = R::one() / R::of(steps as f64);
        let last = traces.last().expect("at least one layer");
        let logits = match self.readout {
            Readout::Membrane => last.v[steps - 1].scale(inv_t)?,
            Readout::SpikeCount => {
                let mut acc = Tensor::zeros(last.o[0].shape());
                for o in &last.o {
                    acc.add_scaled_assign(o, inv_t)?;
                }
                acc
            }
        };
        let mut input_shape = vec![n];
        input_shape.extend_from_slice(&x.shape()[1..]);
        Ok((
            logits,
            SnnTrace {
                layers: traces,
                timesteps: steps,
                input_shape,
            },
        ))
    }

    /// Backpropagation through time with the surrogate standing in for
    /// `∂O/∂V`.
    pub fn backward(&self, trace: &SnnTrace<R>, dlogits: &Tensor<R>) -> Result<SnnGrads<R>> {
        self.backward_with(trace, dlogits, &self.surrogate)
    }

    pub fn backward_with(
        &self,
        trace: &SnnTrace<R>,
        dlogits: &Tensor<R>,
        spec: &SurrogateSpec,
    ) -> Result<SnnGrads<R>> {
        spec.validate()?;
        let steps = self.timesteps;
        if trace.layers.len() != self.layers.len() || trace.timesteps != steps {
            return Err(Error::State(format!(
                "trace has {} layers × {} steps, net has {} × {}",
                trace.layers.len(),
                trace.timesteps,
                self.layers.len(),
                steps
            )));
        }
        let n = trace.batch();
        let classes = self.num_classes();
        if dlogits.shape() != [n, classes] {
            return Err(Error::dim(
                "snn_backward",
                format!("dlogits {:?}, expected [{n}, {classes}]", dlogits.shape()),
            ));
        }
        let inv_t = R::one() / R::of(steps as f64);
        let top = self.layers.len() - 1;

        // gradient w.r.t. the input current I[t] of the current layer
        let mut grad_current: Vec<Tensor<R>> = if self.is_integrator(top) {
            let lam = R::of(self.layers[top].neuron.leak);
            let mut g = vec![dlogits.scale(inv_t)?];
            for _ in 1..steps {
                let next = g.last().expect("non-empty").scale(lam)?;
                g.push(next);
            }
            g.reverse();
            g
        } else {
            let g = dlogits.scale(inv_t)?;
            self.spiking_backward(top, &trace.layers[top], vec![g; steps], spec)?
        };

        let mut dweights = vec![None; self.layers.len()];
        let mut dbiases = vec![None; self.layers.len()];
        let mut dinput = None;
        for l in (0..=top).rev() {
            let layer = &self.layers[l];
            let lt = &trace.layers[l];
            let mut db = Tensor::zeros(&[layer.outputs()]);
            for g in &grad_current {
                db.add_scaled_assign(&g.sum_rows(), R::one())?;
            }
            let is_static = lt.is_static();
            let grad_syn: Vec<Tensor<R>>;
            if is_static {
                let mut total = grad_current[0].clone();
                for g in &grad_current[1..] {
                    total.add_scaled_assign(g, R::one())?;
                }
                dweights[l] = Some(lt.synaptic[0].matmul_tn(&total)?);
                grad_syn = vec![total.matmul_nt(&layer.weights)?];
            } else {
                let mut dw = Tensor::zeros(layer.weights.shape());
                for (x, g) in lt.synaptic.iter().zip(&grad_current) {
                    dw.add_scaled_assign(&x.matmul_tn(g)?, R::one())?;
                }
                dweights[l] = Some(dw);
                grad_syn = grad_current
                    .iter()
                    .map(|g| g.matmul_nt(&layer.weights))
                    .collect::<Result<_>>()?;
            }
            dbiases[l] = Some(db);

            let grad_presyn = if is_static {
                grad_syn
            } else {
                synapse_backward(&layer.synapse, grad_syn)?
            };
            if l == 0 {
                let mut acc = grad_presyn[0].clone();
                for g in &grad_presyn[1..] {
                    acc.add_scaled_assign(g, R::one())?;
                }
                dinput = Some(acc);
            } else {
                grad_current = self.spiking_backward(l - 1, &trace.layers[l - 1], grad_presyn, spec)?;
            }
        }
        let input = dinput
            .expect("first layer visited")
            .reshape(&trace.input_shape)?
            .ensure_finite("snn_backward")?;
        Ok(SnnGrads {
            weights: dweights.into_iter().map(|w| w.expect("visited")).collect(),
            biases: dbiases.into_iter().map(|b| b.expect("visited")).collect(),
            input,
        })
    }

    /// Reverse-time pass through one spiking layer. `grad_spikes[t]` is
    /// `∂L/∂O[t]` from above; returns `∂L/∂I[t]`.
    fn spiking_backward(
        &self,
        l: usize,
        lt: &LayerTrace<R>,
        grad_spikes: Vec<Tensor<R>>,
        spec: &SurrogateSpec,
    ) -> Result<Vec<Tensor<R>>> {
        let cfg = &self.layers[l].neuron;
        let steps = self.timesteps;
        if grad_spikes.len() != steps || lt.v.len() != steps {
            return Err(Error::State("trace length does not match timesteps".into()));
        }
        let lam = R::of(cfg.leak);
        let th = R::of(cfg.threshold);
        let width = lt.v[0].len();
        let shape = lt.v[0].shape().to_vec();
        let keep_reset = if self.detach_reset { R::zero() } else { R::one() };
        let mut gv_next = vec![R::zero(); width];
        let mut gk_next = vec![R::zero(); width];
        let mut out = vec![Tensor::zeros(&shape); steps];
        for t in (0..steps).rev() {
            let v = lt.v[t].data();
            let o = lt.o[t].data();
            let gext = grad_spikes[t].data();
            let mut gv = vec![R::zero(); width];
            let mut gk = vec![R::zero(); width];
            for i in 0..width {
                let reset_path = match cfg.kind {
                    NeuronKind::HardReset => -lam * v[i] * gv_next[i],
                    NeuronKind::SoftReset => -th * gv_next[i],
                    NeuronKind::Adaptive { .. } => gk_next[i],
                };
                let go = gext[i] + keep_reset * reset_path;
                let carry = match cfg.kind {
                    NeuronKind::HardReset => lam * (R::one() - o[i]),
                    _ => lam,
                };
                gv[i] = go * spec.grad_at(v[i], th) + carry * gv_next[i];
                if let NeuronKind::Adaptive { decay } = cfg.kind {
                    gk[i] = -th * gv_next[i] + R::of(decay) * gk_next[i];
                }
            }
            out[t] = Tensor::new(shape.clone(), gv.clone())?;
            gv_next = gv;
            gk_next = gk;
        }
        Ok(out)
    }

    pub fn parameters(&self) -> Vec<&Tensor<R>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<R>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }
}

impl<R: Real> SnnGrads<R> {
    /// Parameter gradients in [`SpikingNet::parameters`] order.
    pub fn into_parameter_grads(self) -> Vec<Tensor<R>> {
        self.weights
            .into_iter()
            .zip(self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

/// Simulate `net` for `timesteps` steps under `encoding`.
pub fn snn_forward<R: Real>(
    net: &SpikingNet<R>,
    x: &Tensor<R>,
    timesteps: usize,
    encoding: InputEncoding,
) -> Result<(Tensor<R>, SnnTrace<R>)> {
    let InputEncoding::Direct = encoding;
    if timesteps == 0 {
        return Err(Error::Config("timesteps must be >= 1".into()));
    }
    if timesteps == net.timesteps {
        net.forward(x)
    } else {
        let mut unrolled = net.clone();
        unrolled.timesteps = timesteps;
        unrolled.forward(x)
    }
}

/// BPTT for a trace produced by [`snn_forward`], substituting `spec` for the
/// spike derivative.
pub fn snn_backward<R: Real>(
    net: &SpikingNet<R>,
    trace: &SnnTrace<R>,
    dlogits: &Tensor<R>,
    spec: &SurrogateSpec,
) -> Result<SnnGrads<R>> {
    if trace.timesteps != net.timesteps {
        let mut unrolled = net.clone();
        unrolled.timesteps = trace.timesteps;
        return unrolled.backward_with(trace, dlogits, spec);
    }
    net.backward_with(trace, dlogits, spec)
}
