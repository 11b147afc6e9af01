//! Spiking neuron dynamics, synapse filters and the time-unrolled network
//! with its BPTT backward pass.

mod net;
pub mod neuron;
pub mod synapse;

pub use net::{
    snn_backward, snn_forward, InputEncoding, LayerTrace, MlpSpec, Readout, SnnGrads, SnnTrace,
    SpikeMode, SpikingLayer, SpikingNet,
};
pub use neuron::{step_adaptive, step_lif_hard, step_lif_soft, NeuronConfig, NeuronKind, NeuronState};
pub use synapse::{synapse_iir, SynapseConfig};

#[cfg(test)]
mod tests;
