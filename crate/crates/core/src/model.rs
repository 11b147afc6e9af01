//! Uniform classifier interface over the three model families.

use serde::{Deserialize, Serialize};

use crate::ann::{attention_rollout, AnnNet, TinyAttentionNet};
use crate::error::{Error, Result};
use crate::numerics::{softmax_cross_entropy, Tensor};
use crate::snn::SpikingNet;
use crate::surrogate::SurrogateSpec;

/// Result of differentiating a scalar objective of the logits w.r.t. the
/// input.
#[derive(Clone, Debug)]
pub struct InputGradient {
    pub value: f32,
    pub logits: Tensor,
    pub grad: Tensor,
    /// Attention rollout mask `φ` at the same input, for attention models.
    pub mask: Option<Tensor>,
}

/// Objective of the logits returning `(value, ∂value/∂logits)`.
pub type Objective<'a> = &'a (dyn Fn(&Tensor) -> Result<(f32, Tensor)> + Sync);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ann,
    Snn,
    Attention,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ann => "ann",
            ModelKind::Snn => "snn",
            ModelKind::Attention => "attention",
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            ModelKind::Ann => 1,
            ModelKind::Snn => 2,
            ModelKind::Attention => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            1 => Ok(ModelKind::Ann),
            2 => Ok(ModelKind::Snn),
            3 => Ok(ModelKind::Attention),
            other => Err(Error::Format(format!("unknown model kind tag {other}"))),
        }
    }
}

/// Forward to logits and backward to the input. Inputs are batches shaped
/// `[n, ..input_shape]`.
pub trait Classifier: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> &[usize];
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
    fn input_gradient(&self, x: &Tensor, objective: Objective<'_>) -> Result<InputGradient>;

    /// Rollout mask `φ` for attention models, `None` otherwise.
    fn attention_map(&self, _x: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// `∇_x` of the mean cross-entropy for `labels`.
    fn loss_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<InputGradient> {
        self.input_gradient(x, &|z: &Tensor| softmax_cross_entropy(z, labels))
    }
}

/// Parameter access and the training loss.
pub trait Trainable: Classifier {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
    /// Mean cross-entropy over the batch, its parameter gradients (in
    /// [`Trainable::parameters`] order) and the logits.
    fn loss_and_grads(&self, x: &Tensor, labels: &[usize]) -> Result<(f32, Vec<Tensor>, Tensor)>;

    /// Spiking models take the backward kernel; others ignore it.
    fn set_surrogate(&mut self, _spec: &SurrogateSpec) -> Result<()> {
        Ok(())
    }
}

fn apply(objective: Objective<'_>, logits: &Tensor) -> Result<(f32, Tensor)> {
    let (value, dlogits) = objective(logits)?;
    if dlogits.shape() != logits.shape() {
        return Err(Error::dim(
            "input_gradient",
            format!("objective gradient {:?} for logits {:?}", dlogits.shape(), logits.shape()),
        ));
    }
    if !value.is_finite() {
        return Err(Error::Evaluation("objective is not finite".into()));
    }
    Ok((value, dlogits))
}

impl Classifier for AnnNet {
    fn kind(&self) -> ModelKind {
        ModelKind::Ann
    }

    fn num_classes(&self) -> usize {
        AnnNet::num_classes(self)
    }

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        AnnNet::logits(self, x)
    }

    fn input_gradient(&self, x: &Tensor, objective: Objective<'_>) -> Result<InputGradient> {
        let (logits, cache) = self.forward(x)?;
        let (value, dlogits) = apply(objective, &logits)?;
        let grad = self.backward(&cache, &dlogits)?.input;
        Ok(InputGradient {
            value,
            logits,
            grad,
            mask: None,
        })
    }
}

impl Trainable for AnnNet {
    fn parameters(&self) -> Vec<&Tensor> {
        AnnNet::parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        AnnNet::parameters_mut(self)
    }

    fn loss_and_grads(&self, x: &Tensor, labels: &[usize]) -> Result<(f32, Vec<Tensor>, Tensor)> {
        let (logits, cache) = self.forward(x)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        Ok((loss, self.backward(&cache, &dlogits)?.params, logits))
    }
}

impl Classifier for SpikingNet {
    fn kind(&self) -> ModelKind {
        ModelKind::Snn
    }

    fn num_classes(&self) -> usize {
        SpikingNet::num_classes(self)
    }

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        SpikingNet::logits(self, x)
    }

    fn input_gradient(&self, x: &Tensor, objective: Objective<'_>) -> Result<InputGradient> {
        let (logits, trace) = self.forward(x)?;
        let (value, dlogits) = apply(objective, &logits)?;
        let grad = self.backward(&trace, &dlogits)?.input;
        Ok(InputGradient {
            value,
            logits,
            grad,
            mask: None,
        })
    }
}

impl Trainable for SpikingNet {
    fn parameters(&self) -> Vec<&Tensor> {
        SpikingNet::parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        SpikingNet::parameters_mut(self)
    }

    fn loss_and_grads(&self, x: &Tensor, labels: &[usize]) -> Result<(f32, Vec<Tensor>, Tensor)> {
        let (logits, trace) = self.forward(x)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        Ok((loss, self.backward(&trace, &dlogits)?.into_parameter_grads(), logits))
    }

    fn set_surrogate(&mut self, spec: &SurrogateSpec) -> Result<()> {
        spec.validate()?;
        self.surrogate = *spec;
        Ok(())
    }
}

fn rollout_batch(net: &TinyAttentionNet, x: &Tensor, records: &[crate::ann::AttentionRecords]) -> Result<Tensor> {
    let width = x.row_len();
    let mut maps = Vec::with_capacity(records.len());
    for (s, rec) in records.iter().enumerate() {
        let sample = Tensor::new(net.config.image_shape.clone(), x.data()[s * width..(s + 1) * width].to_vec())?;
        maps.push(attention_rollout(rec, &sample, net.config.patch)?);
    }
    Tensor::stack(&maps.iter().collect::<Vec<_>>())
}

impl Classifier for TinyAttentionNet {
    fn kind(&self) -> ModelKind {
        ModelKind::Attention
    }

    fn num_classes(&self) -> usize {
        TinyAttentionNet::num_classes(self)
    }

    fn input_shape(&self) -> &[usize] {
        TinyAttentionNet::input_shape(self)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        TinyAttentionNet::logits(self, x)
    }

    fn input_gradient(&self, x: &Tensor, objective: Objective<'_>) -> Result<InputGradient> {
        let (logits, cache) = self.forward(x)?;
        let (value, dlogits) = apply(objective, &logits)?;
        let grad = self.backward(&cache, &dlogits)?.input;
        let mask = rollout_batch(self, x, &cache.records())?;
        Ok(InputGradient {
            value,
            logits,
            grad,
            mask: Some(mask),
        })
    }

    fn attention_map(&self, x: &Tensor) -> Result<Option<Tensor>> {
        let (_, records) = self.attention_forward(x)?;
        rollout_batch(self, x, &records).map(Some)
    }
}

impl Trainable for TinyAttentionNet {
    fn parameters(&self) -> Vec<&Tensor> {
        TinyAttentionNet::parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        TinyAttentionNet::parameters_mut(self)
    }

    fn loss_and_grads(&self, x: &Tensor, labels: &[usize]) -> Result<(f32, Vec<Tensor>, Tensor)> {
        let (logits, cache) = self.forward(x)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        Ok((loss, self.backward(&cache, &dlogits)?.params, logits))
    }
}

/// Any of the three model families, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Model {
    Ann(AnnNet),
    Snn(SpikingNet),
    Attention(TinyAttentionNet),
}

impl Model {
    pub fn as_classifier(&self) -> &dyn Classifier {
        match self {
            Model::Ann(m) => m,
            Model::Snn(m) => m,
            Model::Attention(m) => m,
        }
    }

    fn as_trainable(&self) -> &dyn Trainable {
        match self {
            Model::Ann(m) => m,
            Model::Snn(m) => m,
            Model::Attention(m) => m,
        }
    }

    fn as_trainable_mut(&mut self) -> &mut dyn Trainable {
        match self {
            Model::Ann(m) => m,
            Model::Snn(m) => m,
            Model::Attention(m) => m,
        }
    }

    pub fn as_snn(&self) -> Option<&SpikingNet> {
        match self {
            Model::Snn(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_ann(&self) -> Option<&AnnNet> {
        match self {
            Model::Ann(m) => Some(m),
            _ => None,
        }
    }
}

impl Classifier for Model {
    fn kind(&self) -> ModelKind {
        self.as_classifier().kind()
    }

    fn num_classes(&self) -> usize {
        self.as_classifier().num_classes()
    }

    fn input_shape(&self) -> &[usize] {
        self.as_classifier().input_shape()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.as_classifier().logits(x)
    }

    fn input_gradient(&self, x: &Tensor, objective: Objective<'_>) -> Result<InputGradient> {
        self.as_classifier().input_gradient(x, objective)
    }

    fn attention_map(&self, x: &Tensor) -> Result<Option<Tensor>> {
        self.as_classifier().attention_map(x)
    }
}

impl Trainable for Model {
    fn parameters(&self) -> Vec<&Tensor> {
        self.as_trainable().parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.as_trainable_mut().parameters_mut()
    }

    fn loss_and_grads(&self, x: &Tensor, labels: &[usize]) -> Result<(f32, Vec<Tensor>, Tensor)> {
        self.as_trainable().loss_and_grads(x, labels)
    }

    fn set_surrogate(&mut self, spec: &SurrogateSpec) -> Result<()> {
        self.as_trainable_mut().set_surrogate(spec)
    }
}
