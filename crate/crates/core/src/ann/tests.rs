use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_difference_grad, identity, relative_error, softmax, softmax_cross_entropy};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn unit(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

/// `L = Σ r ⊙ logits` with its gradient `r`.
fn probe_ann(net: &AnnNet<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let (_, cache) = net.forward(x).unwrap();
    let g = net.backward(&cache, r).unwrap();
    (g.input, g.params)
}

#[test]
fn dense_input_gradient_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random(&[5, 3], &mut rng);
    let net = AnnNet::new(
        vec![AnnLayer::Dense {
            weights: w.clone(),
            bias: random(&[3], &mut rng),
        }],
        vec![5],
    )
    .unwrap();
    let x = random(&[4, 5], &mut rng);
    let labels = [0, 1, 2, 1];
    let (logits, cache) = net.forward(&x).unwrap();
    let (_, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();
    let g = net.backward(&cache, &dlogits).unwrap();
    // (softmax − onehot)/n · Wᵀ
    let p = softmax(&logits);
    for s in 0..4 {
        for i in 0..5 {
            let mut want = 0.0;
            for j in 0..3 {
                let onehot = if labels[s] == j { 1.0 } else { 0.0 };
                want += (p.row(s)[j] - onehot) / 4.0 * w.data()[i * 3 + j];
            }
            assert!((g.input.row(s)[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn relu_blocks_negative_preactivation() {
    let net = AnnNet::new(
        vec![
            AnnLayer::Dense {
                weights: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                bias: Tensor::zeros(&[2]),
            },
            AnnLayer::Relu,
            AnnLayer::Dense {
                weights: Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(),
                bias: Tensor::zeros(&[1]),
            },
        ],
        vec![2],
    )
    .unwrap();
    let x = Tensor::new(vec![1, 2], vec![-0.5, 0.7]).unwrap();
    let (g, _) = probe_ann(&net, &x, &Tensor::ones(&[1, 1]));
    assert_eq!(g.data(), &[0.0, 1.0]);
}

fn check_ann(net: &AnnNet<f64>, x: &Tensor<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let classes = net.num_classes();
    let r = random(&[x.shape()[0], classes], rng);
    let (gx, gp) = probe_ann(net, x, &r);
    let loss = |n: &AnnNet<f64>, x: &Tensor<f64>| n.logits(x).unwrap().mul(&r).unwrap().sum();
    let fx = finite_difference_grad(|xx| Ok(loss(net, xx)), x, 1e-6).unwrap();
    let mut worst = relative_error(&gx, &fx);
    for (pi, g) in gp.iter().enumerate() {
        let p0 = net.parameters()[pi].clone();
        let fp = finite_difference_grad(
            |pp| {
                let mut m = net.clone();
                *m.parameters_mut()[pi] = pp.clone();
                Ok(loss(&m, x))
            },
            &p0,
            1e-6,
        )
        .unwrap();
        worst = worst.max(relative_error(g, &fp));
    }
    worst
}

#[test]
fn mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..5 {
        let net = AnnNet::<f64>::mlp(&[6, 5, 4, 3], &[6], case).unwrap();
        let x = random(&[3, 6], &mut rng);
        let err = check_ann(&net, &x, &mut rng);
        assert!(err < 1e-5, "case {case}: {err}");
    }
}

#[test]
fn cnn_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = AnnNet::<f64>::small_cnn(&[2, 4, 4], 3, 7).unwrap();
    for p in net.parameters_mut() {
        // non-zero biases so every ReLU path is exercised
        *p = p.map(|v| v + 0.05);
    }
    let x = random(&[2, 2, 4, 4], &mut rng);
    let err = check_ann(&net, &x, &mut rng);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = random(&[2, 1, 3, 3], &mut rng);
    let b = random(&[2], &mut rng);
    let x = random(&[1, 1, 3, 4], &mut rng);
    let net = AnnNet::new(
        vec![AnnLayer::Conv2d {
            weights: w.clone(),
            bias: b.clone(),
        }, AnnLayer::Flatten],
        vec![1, 3, 4],
    )
    .unwrap();
    let y = net.logits(&x).unwrap();
    for o in 0..2 {
        for r in 0..3i64 {
            for c in 0..4i64 {
                let mut want = b.data()[o];
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let (iy, ix) = (r + ky - 1, c + kx - 1);
                        if (0..3).contains(&iy) && (0..4).contains(&ix) {
                            want += w.data()[(o * 3 + ky as usize) * 3 + kx as usize]
                                * x.data()[(iy * 4 + ix) as usize];
                        }
                    }
                }
                let got = y.data()[o * 12 + (r * 4 + c) as usize];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn shape_mismatch_is_a_dimension_error() {
    let net = AnnNet::<f32>::mlp(&[4, 3], &[4], 0).unwrap();
    let err = net.logits(&Tensor::zeros(&[2, 5])).unwrap_err();
    assert_eq!(err.kind(), "dimension");
    let bad = AnnNet::<f32>::new(
        vec![AnnLayer::Dense {
            weights: Tensor::zeros(&[3, 2]),
            bias: Tensor::zeros(&[2]),
        }],
        vec![4],
    );
    assert_eq!(bad.unwrap_err().kind(), "dimension");
}

fn tiny_config() -> AttentionConfig {
    AttentionConfig {
        image_shape: vec![1, 4, 4],
        patch: 2,
        embed: 8,
        layers: 2,
        heads: 2,
        mlp_hidden: 6,
        classes: 3,
    }
}

fn check_attention(net: &TinyAttentionNet<f64>, x: &Tensor<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let r = random(&[x.shape()[0], net.num_classes()], rng);
    let (_, cache) = net.forward(x).unwrap();
    let g = net.backward(&cache, &r).unwrap();
    let loss = |n: &TinyAttentionNet<f64>, x: &Tensor<f64>| n.logits(x).unwrap().mul(&r).unwrap().sum();
    let fx = finite_difference_grad(|xx| Ok(loss(net, xx)), x, 1e-6).unwrap();
    let mut worst = relative_error(&g.input, &fx);
    for (pi, gp) in g.params.iter().enumerate() {
        let p0 = net.parameters()[pi].clone();
        let fp = finite_difference_grad(
            |pp| {
                let mut m = net.clone();
                *m.parameters_mut()[pi] = pp.clone();
                Ok(loss(&m, x))
            },
            &p0,
            1e-6,
        )
        .unwrap();
        worst = worst.max(relative_error(gp, &fp));
    }
    worst
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..3 {
        let net = TinyAttentionNet::<f64>::new(tiny_config(), seed).unwrap();
        let x = unit(&[2, 1, 4, 4], &mut rng);
        let err = check_attention(&net, &x, &mut rng);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn attention_records_are_row_stochastic() {
    let net = TinyAttentionNet::<f32>::new(AttentionConfig::new(&[1, 28, 28], 10), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn(&[2, 1, 28, 28], |_| rng.gen_range(0.0..1.0));
    let (_, records) = net.attention_forward(&x).unwrap();
    assert_eq!(records.len(), 2);
    for sample in &records {
        assert_eq!(sample.len(), 2);
        for layer in sample {
            assert_eq!(layer.len(), 2);
            for a in layer {
                assert_eq!(a.shape(), &[50, 50]);
                for r in 0..50 {
                    assert!(a.row(r).iter().all(|&v| v >= 0.0));
                    assert!((a.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn zero_queries_give_uniform_attention() {
    let mut cfg = tiny_config();
    cfg.layers = 1;
    cfg.heads = 1;
    let mut net = TinyAttentionNet::<f64>::new(cfg, 0).unwrap();
    net.layers[0].wq = Tensor::zeros(&[8, 8]);
    let x = Tensor::full(&[1, 1, 4, 4], 0.3);
    let (_, records) = net.attention_forward(&x).unwrap();
    for &v in records[0][0][0].data() {
        assert!((v - 0.2).abs() < 1e-12);
    }
}

#[test]
fn indivisible_image_is_a_config_error() {
    let cfg = AttentionConfig::new(&[1, 30, 30], 10);
    assert_eq!(TinyAttentionNet::<f32>::new(cfg, 0).unwrap_err().kind(), "config");
}

#[test]
fn patch_layout_round_trips() {
    let mut cfg = tiny_config();
    cfg.image_shape = vec![2, 4, 6];
    let net = TinyAttentionNet::<f64>::new(cfg, 0).unwrap();
    let x: Vec<f64> = (0..48).map(f64::from).collect();
    let p = net.patchify(&x);
    assert_eq!(p.shape(), &[6, 8]);
    // first patch: channel 0 rows 0-1 cols 0-1, then channel 1
    assert_eq!(p.row(0), &[0.0, 1.0, 6.0, 7.0, 24.0, 25.0, 30.0, 31.0]);
    assert_eq!(net.unpatchify(&p), x);
}

fn stochastic(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    softmax(&Tensor::from_fn(&[n, n], |_| rng.gen_range(-3.0..3.0)))
}

#[test]
fn identity_attention_falls_back_to_uniform() {
    let records = vec![vec![identity::<f64>(5)]; 2];
    assert_eq!(rollout_matrix(&records).unwrap(), identity(5));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = unit(&[1, 4, 4], &mut rng);
    assert_eq!(attention_rollout(&records, &x, 2).unwrap(), x);
}

#[test]
fn single_layer_rollout_by_hand() {
    // class row of W = [0, 1, 0] → 0.5W + 0.5I gives [0.5, 0.5, 0]
    let w = Tensor::new(
        vec![3, 3],
        vec![0.0, 1.0, 0.0, 0.2, 0.3, 0.5, 0.1, 0.1, 0.8],
    )
    .unwrap();
    let x = Tensor::full(&[1, 2, 4], 0.8);
    let phi = attention_rollout(&vec![vec![w]], &x, 2).unwrap();
    assert_eq!(phi.data(), &[0.8, 0.8, 0.0, 0.0, 0.8, 0.8, 0.0, 0.0]);

    // class row [0.2, 0.6, 0.2] → [0.6, 0.3, 0.1], patches [0.3, 0.1] → [1, 1/3]
    let w = Tensor::new(
        vec![3, 3],
        vec![0.2, 0.6, 0.2, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    )
    .unwrap();
    let phi = attention_rollout(&vec![vec![w]], &Tensor::ones(&[1, 2, 4]), 2).unwrap();
    let third = 1.0 / 3.0;
    let want = [1.0, 1.0, third, third, 1.0, 1.0, third, third];
    for (g, w) in phi.data().iter().zip(want) {
        let g: f64 = *g;
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn rollout_rejects_token_mismatch() {
    let records = vec![vec![identity::<f64>(4)]];
    let err = attention_rollout(&records, &Tensor::ones(&[1, 4, 4]), 2).unwrap_err();
    assert_eq!(err.kind(), "dimension");
    assert_eq!(rollout_matrix::<f64>(&vec![]).unwrap_err().kind(), "dimension");
}

#[test]
fn rollout_preserves_row_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let layers = rng.gen_range(1..4);
        let heads = rng.gen_range(1..3);
        let n = rng.gen_range(2..8);
        let records: AttentionRecords<f64> =
            (0..layers).map(|_| (0..heads).map(|_| stochastic(n, &mut rng)).collect()).collect();
        let joint = rollout_matrix(&records).unwrap();
        for r in 0..n {
            assert!(joint.row(r).iter().all(|&v| v >= 0.0));
            assert!((joint.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
}

proptest! {
    #[test]
    fn ones_mask_is_multiplicative_identity(v in proptest::collection::vec(-10.0f32..10.0, 1..40)) {
        let g = Tensor::new(vec![v.len()], v).unwrap();
        prop_assert_eq!(g.mul(&ones_mask(&g)).unwrap(), g);
    }
}
