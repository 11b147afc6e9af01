//! Spiking neural networks trained with surrogate-gradient BPTT, the
//! FGSM/PGD/MIM white-box attacks, transferability measurement and the
//! SAGA / Auto-SAGA multi-model attacks.

pub mod ann;
pub mod attacks;
pub mod convert;
pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod model;
pub mod numerics;
pub mod snn;
pub mod surrogate;
pub mod train;

pub use error::{Error, Result};
pub use model::{Classifier, Model, ModelKind, Trainable};
pub use numerics::Tensor;
