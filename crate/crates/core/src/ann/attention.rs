use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::NetGrads;
use crate::error::{Error, Result};
use crate::numerics::init::kaiming_uniform;
use crate::numerics::{softmax, Real, Tensor};

/// Architecture of a [`TinyAttentionNet`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// `[c, h, w]`
    pub image_shape: Vec<usize>,
    pub patch: usize,
    pub embed: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
}

impl AttentionConfig {
    /// Patch 4, width 32, two layers of two heads, MLP width 64.
    pub fn new(image_shape: &[usize], classes: usize) -> Self {
        Self {
            image_shape: image_shape.to_vec(),
            patch: 4,
            embed: 32,
            layers: 2,
            heads: 2,
            mlp_hidden: 64,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.image_shape;
        if s.len() != 3 || s.contains(&0) {
            return Err(Error::Config(format!("image shape must be [c, h, w], got {s:?}")));
        }
        if self.patch == 0 || !s[1].is_multiple_of(self.patch) || !s[2].is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}x{} patches",
                s[1], s[2], self.patch, self.patch
            )));
        }
        if self.heads == 0 || !self.embed.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed width {} not divisible by {} heads",
                self.embed, self.heads
            )));
        }
        if self.layers == 0 || self.mlp_hidden == 0 || self.classes == 0 {
            return Err(Error::Config("layers, mlp_hidden and classes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_shape[1] / self.patch) * (self.image_shape[2] / self.patch)
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.image_shape[0] * self.patch * self.patch
    }
}

/// One residual block: multi-head self-attention then a ReLU MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer<R = f32> {
    pub wq: Tensor<R>,
    pub wk: Tensor<R>,
    pub wv: Tensor<R>,
    pub wo: Tensor<R>,
    pub bo: Tensor<R>,
    pub w1: Tensor<R>,
    pub b1: Tensor<R>,
    pub w2: Tensor<R>,
    pub b2: Tensor<R>,
}

/// Patch-embedding attention classifier with a class token and learned
/// position embeddings. No normalisation layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyAttentionNet<R = f32> {
    pub config: AttentionConfig,
    pub embed_w: Tensor<R>,
    pub embed_b: Tensor<R>,
    pub cls: Tensor<R>,
    pub pos: Tensor<R>,
    pub layers: Vec<AttentionLayer<R>>,
    pub head_w: Tensor<R>,
    pub head_b: Tensor<R>,
}

/// Softmaxed attention matrices of one sample, indexed `[layer][head]`,
/// each `[tokens, tokens]` with the class token first.
pub type AttentionRecords<R = f32> = Vec<Vec<Tensor<R>>>;

#[derive(Clone, Debug)]
struct LayerCache<R> {
    z: Tensor<R>,
    q: Tensor<R>,
    k: Tensor<R>,
    v: Tensor<R>,
    attn: Vec<Tensor<R>>,
    concat: Tensor<R>,
    z1: Tensor<R>,
    hpre: Tensor<R>,
    h: Tensor<R>,
}

#[derive(Clone, Debug)]
struct SampleCache<R> {
    patches: Tensor<R>,
    layers: Vec<LayerCache<R>>,
    out: Tensor<R>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<R = f32> {
    samples: Vec<SampleCache<R>>,
}

impl<R: Real> AttentionCache<R> {
    /// Attention records of every sample in the batch.
    pub fn records(&self) -> Vec<AttentionRecords<R>> {
        self.samples
            .iter()
            .map(|s| s.layers.iter().map(|l| l.attn.clone()).collect())
            .collect()
    }
}

fn take_cols<R: Real>(t: &Tensor<R>, start: usize, len: usize) -> Tensor<R> {
    let w = t.row_len();
    let mut out = Vec::with_capacity(t.rows() * len);
    for r in 0..t.rows() {
        out.extend_from_slice(&t.data()[r * w + start..r * w + start + len]);
    }
    Tensor::new(vec![t.rows(), len], out).expect("column block shape")
}

fn put_cols<R: Real>(dst: &mut Tensor<R>, src: &Tensor<R>, start: usize) {
    let w = dst.row_len();
    let len = src.row_len();
    for r in 0..src.rows() {
        dst.data_mut()[r * w + start..r * w + start + len].copy_from_slice(src.row(r));
    }
}

fn add_row_bias<R: Real>(t: &mut Tensor<R>, b: &Tensor<R>) {
    let w = b.len();
    for row in t.data_mut().chunks_mut(w) {
        for (v, &bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
}

impl<R: Real> TinyAttentionNet<R> {
    pub fn new(config: AttentionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed;
        let f = config.mlp_hidden;
        let pd = config.patch_dim();
        let small = |shape: &[usize], rng: &mut ChaCha8Rng| {
            Tensor::from_fn(shape, |_| R::of(rng.gen_range(-0.1..0.1)))
        };
        let embed_w = kaiming_uniform(&[pd, d], pd, 1.0, &mut rng);
        let cls = small(&[d], &mut rng);
        let pos = small(&[config.num_tokens(), d], &mut rng);
        let layers = (0..config.layers)
            .map(|_| AttentionLayer {
                wq: kaiming_uniform(&[d, d], d, 1.0, &mut rng),
                wk: kaiming_uniform(&[d, d], d, 1.0, &mut rng),
                wv: kaiming_uniform(&[d, d], d, 1.0, &mut rng),
                wo: kaiming_uniform(&[d, d], d, 0.5, &mut rng),
                bo: Tensor::zeros(&[d]),
                w1: kaiming_uniform(&[d, f], d, 2.0_f64.sqrt(), &mut rng),
                b1: Tensor::zeros(&[f]),
                w2: kaiming_uniform(&[f, d], f, 0.5, &mut rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let head_w = kaiming_uniform(&[d, config.classes], d, 1.0, &mut rng);
        Ok(Self {
            embed_b: Tensor::zeros(&[d]),
            head_b: Tensor::zeros(&[config.classes]),
            config,
            embed_w,
            cls,
            pos,
            layers,
            head_w,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.config.image_shape
    }

    /// `[patches, c·p·p]`, patches in row-major grid order.
    pub(crate) fn patchify(&self, x: &[R]) -> Tensor<R> {
        let (c, h, w) = (
            self.config.image_shape[0],
            self.config.image_shape[1],
            self.config.image_shape[2],
        );
        let p = self.config.patch;
        let (gh, gw) = (h / p, w / p);
        let mut out = Vec::with_capacity(x.len());
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = (ch * h + py * p + dy) * w + px * p;
                        out.extend_from_slice(&x[row..row + p]);
                    }
                }
            }
        }
        Tensor::new(vec![gh * gw, c * p * p], out).expect("patch layout")
    }

    pub(crate) fn unpatchify(&self, patches: &Tensor<R>) -> Vec<R> {
        let (c, h, w) = (
            self.config.image_shape[0],
            self.config.image_shape[1],
            self.config.image_shape[2],
        );
        let p = self.config.patch;
        let gw = w / p;
        let mut out = vec![R::zero(); c * h * w];
        for (idx, patch) in patches.data().chunks(c * p * p).enumerate() {
            let (py, px) = (idx / gw, idx % gw);
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * h + py * p + dy) * w + px * p;
                    let src = (ch * p + dy) * p;
                    out[row..row + p].copy_from_slice(&patch[src..src + p]);
                }
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor<R>) -> Result<usize> {
        if x.rank() < 2 || x.shape()[1..] != self.config.image_shape[..] {
            return Err(Error::dim(
                "attention_forward",
                format!("input {:?} for image shape {:?}", x.shape(), self.config.image_shape),
            ));
        }
        Ok(x.shape()[0])
    }

    fn forward_sample(&self, x: &[R]) -> Result<(Vec<R>, SampleCache<R>)> {
        let cfg = &self.config;
        let d = cfg.embed;
        let dh = d / cfg.heads;
        let scale = R::one() / R::of(dh as f64).sqrt();
        let patches = self.patchify(x);
        let mut e = patches.matmul(&self.embed_w)?;
        add_row_bias(&mut e, &self.embed_b);
        let mut z_data = self.cls.data().to_vec();
        z_data.extend_from_slice(e.data());
        let mut z = Tensor::new(vec![cfg.num_tokens(), d], z_data)?.add(&self.pos)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = z.matmul(&layer.wq)?;
            let k = z.matmul(&layer.wk)?;
            let v = z.matmul(&layer.wv)?;
            let mut concat = Tensor::zeros(z.shape());
            let mut attn = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = take_cols(&q, h * dh, dh);
                let kh = take_cols(&k, h * dh, dh);
                let vh = take_cols(&v, h * dh, dh);
                let a = softmax(&qh.matmul_nt(&kh)?.scale(scale)?);
                put_cols(&mut concat, &a.matmul(&vh)?, h * dh);
                attn.push(a);
            }
            let mut z1 = concat.matmul(&layer.wo)?;
            add_row_bias(&mut z1, &layer.bo);
            let z1 = z1.add(&z)?;
            let mut hpre = z1.matmul(&layer.w1)?;
            add_row_bias(&mut hpre, &layer.b1);
            let hact = hpre.map(|v| v.max(R::zero()));
            let mut z2 = hact.matmul(&layer.w2)?;
            add_row_bias(&mut z2, &layer.b2);
            let z2 = z2.add(&z1)?;
            caches.push(LayerCache {
                z,
                q,
                k,
                v,
                attn,
                concat,
                z1,
                hpre,
                h: hact,
            });
            z = z2;
        }
        let cls_out = Tensor::new(vec![1, d], z.row(0).to_vec())?;
        let mut logits = cls_out.matmul(&self.head_w)?;
        add_row_bias(&mut logits, &self.head_b);
        Ok((
            logits.into_data(),
            SampleCache {
                patches,
                layers: caches,
                out: z,
            },
        ))
    }

    pub fn logits(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        self.forward(x).map(|(y, _)| y)
    }

    pub fn forward(&self, x: &Tensor<R>) -> Result<(Tensor<R>, AttentionCache<R>)> {
        let n = self.check_input(x)?;
        let width = x.row_len();
        let per: Vec<(Vec<R>, SampleCache<R>)> = (0..n)
            .into_par_iter()
            .map(|s| self.forward_sample(&x.data()[s * width..(s + 1) * width]))
            .collect::<Result<_>>()?;
        let mut logits = Vec::with_capacity(n * self.config.classes);
        let mut samples = Vec::with_capacity(n);
        for (l, c) in per {
            logits.extend(l);
            samples.push(c);
        }
        let logits = Tensor::new(vec![n, self.config.classes], logits)?.ensure_finite("attention_forward")?;
        Ok((logits, AttentionCache { samples }))
    }

    /// Logits plus the recorded attention matrices of every sample.
    pub fn attention_forward(&self, x: &Tensor<R>) -> Result<(Tensor<R>, Vec<AttentionRecords<R>>)> {
        let (logits, cache) = self.forward(x)?;
        Ok((logits, cache.records()))
    }

    fn backward_sample(&self, cache: &SampleCache<R>, dlogits: &[R]) -> Result<(Vec<Tensor<R>>, Vec<R>)> {
        let cfg = &self.config;
        let d = cfg.embed;
        let dh = d / cfg.heads;
        let scale = R::one() / R::of(dh as f64).sqrt();
        let dl = Tensor::new(vec![1, cfg.classes], dlogits.to_vec())?;
        let cls_out = Tensor::new(vec![1, d], cache.out.row(0).to_vec())?;
        let d_head_w = cls_out.matmul_tn(&dl)?;
        let d_head_b = dl.sum_rows();
        let mut dz = Tensor::zeros(cache.out.shape());
        dz.row_mut(0).copy_from_slice(dl.matmul_nt(&self.head_w)?.data());

        let mut layer_grads: Vec<Vec<Tensor<R>>> = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            // MLP branch
            let dw2 = lc.h.matmul_tn(&dz)?;
            let db2 = dz.sum_rows();
            let mut dhpre = dz.matmul_nt(&layer.w2)?;
            for (g, &v) in dhpre.data_mut().iter_mut().zip(lc.hpre.data()) {
                if v <= R::zero() {
                    *g = R::zero();
                }
            }
            let dw1 = lc.z1.matmul_tn(&dhpre)?;
            let db1 = dhpre.sum_rows();
            let dz1 = dz.add(&dhpre.matmul_nt(&layer.w1)?)?;
            // attention branch
            let dwo = lc.concat.matmul_tn(&dz1)?;
            let dbo = dz1.sum_rows();
            let dconcat = dz1.matmul_nt(&layer.wo)?;
            let mut dq = Tensor::zeros(lc.q.shape());
            let mut dk = Tensor::zeros(lc.k.shape());
            let mut dv = Tensor::zeros(lc.v.shape());
            for h in 0..cfg.heads {
                let qh = take_cols(&lc.q, h * dh, dh);
                let kh = take_cols(&lc.k, h * dh, dh);
                let vh = take_cols(&lc.v, h * dh, dh);
                let a = &lc.attn[h];
                let doh = take_cols(&dconcat, h * dh, dh);
                let da = doh.matmul_nt(&vh)?;
                put_cols(&mut dv, &a.matmul_tn(&doh)?, h * dh);
                let mut ds = a.mul(&da)?;
                let tokens = a.rows();
                for r in 0..tokens {
                    let dot: R = ds.row(r).iter().copied().sum();
                    let arow = a.row(r).to_vec();
                    for (g, av) in ds.row_mut(r).iter_mut().zip(arow) {
                        *g -= av * dot;
                    }
                }
                let ds = ds.scale(scale)?;
                put_cols(&mut dq, &ds.matmul(&kh)?, h * dh);
                put_cols(&mut dk, &ds.matmul_tn(&qh)?, h * dh);
            }
            let dwq = lc.z.matmul_tn(&dq)?;
            let dwk = lc.z.matmul_tn(&dk)?;
            let dwv = lc.z.matmul_tn(&dv)?;
            let mut dz_prev = dz1;
            dz_prev.add_scaled_assign(&dq.matmul_nt(&layer.wq)?, R::one())?;
            dz_prev.add_scaled_assign(&dk.matmul_nt(&layer.wk)?, R::one())?;
            dz_prev.add_scaled_assign(&dv.matmul_nt(&layer.wv)?, R::one())?;
            layer_grads.push(vec![dwq, dwk, dwv, dwo, dbo, dw1, db1, dw2, db2]);
            dz = dz_prev;
        }
        layer_grads.reverse();

        let d_pos = dz.clone();
        let d_cls = Tensor::new(vec![d], dz.row(0).to_vec())?;
        let de = Tensor::new(vec![cfg.num_patches(), d], dz.data()[d..].to_vec())?;
        let d_embed_w = cache.patches.matmul_tn(&de)?;
        let d_embed_b = de.sum_rows();
        let dpatches = de.matmul_nt(&self.embed_w)?;
        let dx = self.unpatchify(&dpatches);

        let mut grads = vec![d_embed_w, d_embed_b, d_cls, d_pos];
        grads.extend(layer_grads.into_iter().flatten());
        grads.push(d_head_w);
        grads.push(d_head_b);
        Ok((grads, dx))
    }

    pub fn backward(&self, cache: &AttentionCache<R>, dlogits: &Tensor<R>) -> Result<NetGrads<R>> {
        let n = cache.samples.len();
        if dlogits.shape() != [n, self.config.classes] {
            return Err(Error::dim(
                "attention_backward",
                format!("dlogits {:?}, expected [{n}, {}]", dlogits.shape(), self.config.classes),
            ));
        }
        let per: Vec<(Vec<Tensor<R>>, Vec<R>)> = cache
            .samples
            .par_iter()
            .enumerate()
            .map(|(s, sc)| self.backward_sample(sc, dlogits.row(s)))
            .collect::<Result<_>>()?;
        let mut params: Option<Vec<Tensor<R>>> = None;
        let mut input = Vec::with_capacity(n * self.config.image_shape.iter().product::<usize>());
        for (g, dx) in per {
            match params.as_mut() {
                None => params = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_scaled_assign(b, R::one())?;
                    }
                }
            }
            input.extend(dx);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.config.image_shape);
        Ok(NetGrads {
            params: params.ok_or_else(|| Error::State("empty attention cache".into()))?,
            input: Tensor::new(shape, input)?.ensure_finite("attention_backward")?,
        })
    }

    pub fn parameters(&self) -> Vec<&Tensor<R>> {
        let mut p = vec![&self.embed_w, &self.embed_b, &self.cls, &self.pos];
        for l in &self.layers {
            p.extend([&l.wq, &l.wk, &l.wv, &l.wo, &l.bo, &l.w1, &l.b1, &l.w2, &l.b2]);
        }
        p.push(&self.head_w);
        p.push(&self.head_b);
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut p = vec![&mut self.embed_w, &mut self.embed_b, &mut self.cls, &mut self.pos];
        for l in &mut self.layers {
            p.extend([
                &mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.bo, &mut l.w1, &mut l.b1, &mut l.w2,
                &mut l.b2,
            ]);
        }
        p.push(&mut self.head_w);
        p.push(&mut self.head_b);
        p
    }

    pub fn cast<S: Real>(&self) -> TinyAttentionNet<S> {
        TinyAttentionNet {
            config: self.config.clone(),
            embed_w: self.embed_w.cast(),
            embed_b: self.embed_b.cast(),
            cls: self.cls.cast(),
            pos: self.pos.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| AttentionLayer {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}
