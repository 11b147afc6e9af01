//! Conventional differentiable classifiers and the toy attention model.

mod attention;
mod rollout;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::init::kaiming_uniform;
use crate::numerics::{Real, Tensor};

pub use attention::{AttentionCache, AttentionConfig, AttentionLayer, AttentionRecords, TinyAttentionNet};
pub use rollout::{attention_rollout, ones_mask, rollout_matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnnLayer<R = f32> {
    /// `y = xW + b` with `W: [in, out]`. Trailing input axes are flattened.
    Dense { weights: Tensor<R>, bias: Tensor<R> },
    /// 3×3 convolution, stride 1, zero padding 1. `W: [out_c, in_c, 3, 3]`.
    Conv2d { weights: Tensor<R>, bias: Tensor<R> },
    Relu,
    Flatten,
    /// 2×2 average pooling, stride 2.
    AvgPool2,
}

impl<R: Real> AnnLayer<R> {
    pub fn name(&self) -> &'static str {
        match self {
            AnnLayer::Dense { .. } => "dense",
            AnnLayer::Conv2d { .. } => "conv2d",
            AnnLayer::Relu => "relu",
            AnnLayer::Flatten => "flatten",
            AnnLayer::AvgPool2 => "avgpool2",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            AnnLayer::Dense { weights, bias } => {
                let width: usize = input.iter().product();
                if weights.rank() != 2 || weights.shape()[0] != width {
                    return Err(Error::dim(
                        "ann_dense",
                        format!("input {input:?} vs weights {:?}", weights.shape()),
                    ));
                }
                if bias.shape() != [weights.shape()[1]] {
                    return Err(Error::dim("ann_dense", format!("bias {:?}", bias.shape())));
                }
                Ok(vec![weights.shape()[1]])
            }
            AnnLayer::Conv2d { weights, bias } => {
                let ws = weights.shape();
                if input.len() != 3 || ws.len() != 4 || ws[1] != input[0] || ws[2] != 3 || ws[3] != 3 {
                    return Err(Error::dim(
                        "ann_conv2d",
                        format!("input {input:?} vs weights {ws:?}"),
                    ));
                }
                if bias.shape() != [ws[0]] {
                    return Err(Error::dim("ann_conv2d", format!("bias {:?}", bias.shape())));
                }
                Ok(vec![ws[0], input[1], input[2]])
            }
            AnnLayer::Relu => Ok(input.to_vec()),
            AnnLayer::Flatten => Ok(vec![input.iter().product()]),
            AnnLayer::AvgPool2 => {
                if input.len() != 3 || !input[1].is_multiple_of(2) || !input[2].is_multiple_of(2) {
                    return Err(Error::dim("ann_avgpool2", format!("input {input:?}")));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
        }
    }

    fn forward(&self, x: &Tensor<R>, out_shape: &[usize]) -> Result<Tensor<R>> {
        let n = x.shape()[0];
        let mut shape = vec![n];
        shape.extend_from_slice(out_shape);
        match self {
            AnnLayer::Dense { weights, bias } => {
                let mut y = x.clone().flatten_rows().matmul(weights)?;
                add_bias_rows(&mut y, bias);
                Ok(y)
            }
            AnnLayer::Conv2d { weights, bias } => conv3x3(x, weights, bias),
            AnnLayer::Relu => Ok(x.map(|v| v.max(R::zero()))),
            AnnLayer::Flatten => x.clone().reshape(&shape),
            AnnLayer::AvgPool2 => Ok(avgpool2(x)),
        }
    }

    /// Returns `(∂L/∂x, parameter grads)`.
    fn backward(&self, x: &Tensor<R>, dy: &Tensor<R>) -> Result<(Tensor<R>, Vec<Tensor<R>>)> {
        match self {
            AnnLayer::Dense { weights, .. } => {
                let x2 = x.clone().flatten_rows();
                let dw = x2.matmul_tn(dy)?;
                let db = dy.sum_rows();
                let dx = dy.matmul_nt(weights)?.reshape(x.shape())?;
                Ok((dx, vec![dw, db]))
            }
            AnnLayer::Conv2d { weights, .. } => {
                let (dx, dw, db) = conv3x3_backward(x, weights, dy)?;
                Ok((dx, vec![dw, db]))
            }
            AnnLayer::Relu => {
                let mut dx = dy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= R::zero() {
                        *g = R::zero();
                    }
                }
                Ok((dx, vec![]))
            }
            AnnLayer::Flatten => Ok((dy.clone().reshape(x.shape())?, vec![])),
            AnnLayer::AvgPool2 => Ok((avgpool2_backward(x.shape(), dy), vec![])),
        }
    }
}

fn add_bias_rows<R: Real>(y: &mut Tensor<R>, bias: &Tensor<R>) {
    let w = bias.len();
    for row in y.data_mut().chunks_mut(w) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

fn conv3x3<R: Real>(x: &Tensor<R>, w: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, ic, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oc = w.shape()[0];
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![R::zero(); n * oc * h * wd];
    for s in 0..n {
        for o in 0..oc {
            let plane = &mut out[(s * oc + o) * h * wd..(s * oc + o + 1) * h * wd];
            plane.iter_mut().for_each(|v| *v = b.data()[o]);
            for c in 0..ic {
                let xin = &xd[(s * ic + c) * h * wd..(s * ic + c + 1) * h * wd];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = wdat[((o * ic + c) * 3 + ky) * 3 + kx];
                        for y in 0..h {
                            let iy = y + ky;
                            if iy < 1 || iy > h {
                                continue;
                            }
                            for xx in 0..wd {
                                let ix = xx + kx;
                                if ix < 1 || ix > wd {
                                    continue;
                                }
                                plane[y * wd + xx] += k * xin[(iy - 1) * wd + ix - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, oc, h, wd], out)?.ensure_finite("conv2d")
}

fn conv3x3_backward<R: Real>(
    x: &Tensor<R>,
    w: &Tensor<R>,
    dy: &Tensor<R>,
) -> Result<(Tensor<R>, Tensor<R>, Tensor<R>)> {
    let (n, ic, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oc = w.shape()[0];
    let (xd, wdat, g) = (x.data(), w.data(), dy.data());
    let mut dx = vec![R::zero(); x.len()];
    let mut dw = vec![R::zero(); w.len()];
    let mut db = vec![R::zero(); oc];
    for s in 0..n {
        for o in 0..oc {
            let gp = &g[(s * oc + o) * h * wd..(s * oc + o + 1) * h * wd];
            db[o] += gp.iter().copied().sum::<R>();
            for c in 0..ic {
                let base = (s * ic + c) * h * wd;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let widx = ((o * ic + c) * 3 + ky) * 3 + kx;
                        let k = wdat[widx];
                        let mut acc = R::zero();
                        for y in 0..h {
                            let iy = y + ky;
                            if iy < 1 || iy > h {
                                continue;
                            }
                            for xx in 0..wd {
                                let ix = xx + kx;
                                if ix < 1 || ix > wd {
                                    continue;
                                }
                                let gv = gp[y * wd + xx];
                                let xi = base + (iy - 1) * wd + ix - 1;
                                acc += gv * xd[xi];
                                dx[xi] += gv * k;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![oc], db)?,
    ))
}

fn avgpool2<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = R::of(0.25);
    let xd = x.data();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let od = out.data_mut();
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let i = p * h * w + 2 * y * w + 2 * xx;
                od[p * oh * ow + y * ow + xx] = quarter * (xd[i] + xd[i + 1] + xd[i + w] + xd[i + w + 1]);
            }
        }
    }
    out
}

fn avgpool2_backward<R: Real>(in_shape: &[usize], dy: &Tensor<R>) -> Tensor<R> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = R::of(0.25);
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let g = quarter * dy.data()[p * oh * ow + y * ow + xx];
                let i = p * h * w + 2 * y * w + 2 * xx;
                d[i] = g;
                d[i + 1] = g;
                d[i + w] = g;
                d[i + w + 1] = g;
            }
        }
    }
    dx
}

/// Feed-forward network of [`AnnLayer`]s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnNet<R = f32> {
    pub layers: Vec<AnnLayer<R>>,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
}

/// Inputs seen by every layer during a forward pass.
#[derive(Clone, Debug)]
pub struct AnnCache<R = f32> {
    inputs: Vec<Tensor<R>>,
}

#[derive(Clone, Debug)]
pub struct NetGrads<R = f32> {
    /// In [`AnnNet::parameters`] order.
    pub params: Vec<Tensor<R>>,
    pub input: Tensor<R>,
}

impl<R: Real> AnnNet<R> {
    pub fn new(layers: Vec<AnnLayer<R>>, input_shape: Vec<usize>) -> Result<Self> {
        let net = Self { layers, input_shape };
        net.shapes()?;
        Ok(net)
    }

    /// Dense/ReLU MLP, no activation after the last layer.
    pub fn mlp(sizes: &[usize], input_shape: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (l, pair) in sizes.windows(2).enumerate() {
            layers.push(AnnLayer::Dense {
                weights: kaiming_uniform(&[pair[0], pair[1]], pair[0], 2.0_f64.sqrt(), &mut rng),
                bias: Tensor::zeros(&[pair[1]]),
            });
            if l + 2 < sizes.len() {
                layers.push(AnnLayer::Relu);
            }
        }
        Self::new(layers, input_shape.to_vec())
    }

    /// `conv(c→8) relu pool conv(8→16) relu pool flatten dense(→classes)`.
    pub fn small_cnn(input_shape: &[usize], classes: usize, seed: u64) -> Result<Self> {
        if input_shape.len() != 3 {
            return Err(Error::Config(format!("small_cnn needs [c, h, w], got {input_shape:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = 2.0_f64.sqrt();
        let c = input_shape[0];
        let flat = 16 * (input_shape[1] / 4) * (input_shape[2] / 4);
        let layers = vec![
            AnnLayer::Conv2d {
                weights: kaiming_uniform(&[8, c, 3, 3], c * 9, gain, &mut rng),
                bias: Tensor::zeros(&[8]),
            },
            AnnLayer::Relu,
            AnnLayer::AvgPool2,
            AnnLayer::Conv2d {
                weights: kaiming_uniform(&[16, 8, 3, 3], 72, gain, &mut rng),
                bias: Tensor::zeros(&[16]),
            },
            AnnLayer::Relu,
            AnnLayer::AvgPool2,
            AnnLayer::Flatten,
            AnnLayer::Dense {
                weights: kaiming_uniform(&[flat, classes], flat, 1.0, &mut rng),
                bias: Tensor::zeros(&[classes]),
            },
        ];
        Self::new(layers, input_shape.to_vec())
    }

    /// Per-sample shapes at each layer boundary, input first.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::Config("ann has no layers".into()));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        if shapes.last().expect("non-empty").len() != 1 {
            return Err(Error::dim(
                "ann",
                format!("output shape {:?} is not a class vector", shapes.last()),
            ));
        }
        Ok(shapes)
    }

    pub fn num_classes(&self) -> usize {
        self.shapes().map(|s| s.last().expect("non-empty")[0]).unwrap_or(0)
    }

    fn check_input(&self, x: &Tensor<R>) -> Result<()> {
        if x.rank() < 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(
                "ann_forward",
                format!("input {:?} for per-sample shape {:?}", x.shape(), self.input_shape),
            ));
        }
        Ok(())
    }

    pub fn logits(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        self.forward(x).map(|(y, _)| y)
    }

    pub fn forward(&self, x: &Tensor<R>) -> Result<(Tensor<R>, AnnCache<R>)> {
        self.check_input(x)?;
        let shapes = self.shapes()?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (layer, shape) in self.layers.iter().zip(&shapes[1..]) {
            let next = layer.forward(&cur, shape)?;
            inputs.push(cur);
            cur = next;
        }
        Ok((cur.ensure_finite("ann_forward")?, AnnCache { inputs }))
    }

    pub fn backward(&self, cache: &AnnCache<R>, dlogits: &Tensor<R>) -> Result<NetGrads<R>> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::State("cache does not match network depth".into()));
        }
        let n = cache.inputs[0].shape()[0];
        let classes = self.num_classes();
        if dlogits.shape() != [n, classes] {
            return Err(Error::dim(
                "ann_backward",
                format!("dlogits {:?}, expected [{n}, {classes}]", dlogits.shape()),
            ));
        }
        let mut g = dlogits.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, x) in self.layers.iter().zip(&cache.inputs).rev() {
            let (dx, dp) = layer.backward(x, &g)?;
            per_layer.push(dp);
            g = dx;
        }
        per_layer.reverse();
        Ok(NetGrads {
            params: per_layer.into_iter().flatten().collect(),
            input: g.ensure_finite("ann_backward")?,
        })
    }

    pub fn parameters(&self) -> Vec<&Tensor<R>> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                AnnLayer::Dense { weights, bias } | AnnLayer::Conv2d { weights, bias } => vec![weights, bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<R>> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                AnnLayer::Dense { weights, bias } | AnnLayer::Conv2d { weights, bias } => vec![weights, bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn cast<S: Real>(&self) -> AnnNet<S> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                AnnLayer::Dense { weights, bias } => AnnLayer::Dense {
                    weights: weights.cast(),
                    bias: bias.cast(),
                },
                AnnLayer::Conv2d { weights, bias } => AnnLayer::Conv2d {
                    weights: weights.cast(),
                    bias: bias.cast(),
                },
                AnnLayer::Relu => AnnLayer::Relu,
                AnnLayer::Flatten => AnnLayer::Flatten,
                AnnLayer::AvgPool2 => AnnLayer::AvgPool2,
            })
            .collect();
        AnnNet {
            layers,
            input_shape: self.input_shape.clone(),
        }
    }
}

#[cfg(test)]
mod tests;
