use super::*;
use crate::ann::AnnNet;
use crate::data::synth_blobs;
use crate::error::Result;
use crate::model::{Classifier, InputGradient, ModelKind, Objective};

fn blob_net(seed: u64) -> AnnNet {
    AnnNet::mlp(&[4, 16, 2], &[4], seed).unwrap()
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let data = synth_blobs(64, 2, 4, 1).unwrap();
    for opt in [Optimizer::sgd(0.0, 0.9), Optimizer::adam(0.0)] {
        let mut net = blob_net(3);
        let before = net.clone();
        train_epochs(&mut net, &data, None, &TrainConfig::new(opt, 2, 5), |_| {}).unwrap();
        assert_eq!(net, before);
    }
}

#[test]
fn separable_blobs_are_learned() {
    let data = synth_blobs(200, 2, 4, 2).unwrap();
    let mut net = blob_net(4);
    let mut cfg = TrainConfig::new(Optimizer::sgd(0.1, 0.9), 20, 6);
    cfg.batch_size = 16;
    let history = train_epochs(&mut net, &data, Some(&data), &cfg, |_| {}).unwrap();
    assert_eq!(history.epochs.len(), 20);
    assert!(evaluate(&net, &data).unwrap().accuracy >= 0.99);
}

#[test]
fn first_epoch_reduces_loss() {
    let data = synth_blobs(200, 4, 6, 3).unwrap();
    let mut net = AnnNet::mlp(&[6, 16, 4], &[6], 9).unwrap();
    let loss_of = |n: &AnnNet| {
        let (x, y) = data.batch(&(0..data.len()).collect::<Vec<_>>()).unwrap();
        n.loss_and_grads(&x, &y).unwrap().0
    };
    let before = loss_of(&net);
    train_epochs(&mut net, &data, None, &TrainConfig::new(Optimizer::sgd(0.05, 0.9), 1, 1), |_| {}).unwrap();
    assert!(loss_of(&net) < before);
}

#[test]
fn training_is_seed_deterministic_and_thread_independent() {
    let data = synth_blobs(120, 3, 5, 4).unwrap();
    let run = |threads: usize, seed: u64| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut net = AnnNet::mlp(&[5, 8, 3], &[5], 1).unwrap();
            let mut cfg = TrainConfig::new(Optimizer::adam(0.01), 3, seed);
            cfg.shard = 7;
            train_epochs(&mut net, &data, None, &cfg, |_| {}).unwrap();
            net
        })
    };
    let a = run(1, 10);
    assert_eq!(a, run(3, 10));
    assert_ne!(a, run(1, 11));
}

#[test]
fn divergence_reports_the_epoch() {
    let data = synth_blobs(64, 2, 4, 5).unwrap();
    let mut net = blob_net(2);
    let cfg = TrainConfig::new(Optimizer::sgd(1e30, 0.0), 5, 1);
    match train_epochs(&mut net, &data, None, &cfg, |_| {}) {
        Err(Error::Diverged { epoch, .. }) => assert!(epoch < 5),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn epoch_callback_sees_every_epoch() {
    let data = synth_blobs(32, 2, 4, 6).unwrap();
    let mut net = blob_net(1);
    let mut seen = Vec::new();
    train_epochs(&mut net, &data, None, &TrainConfig::new(Optimizer::adam(1e-3), 3, 0), |s| {
        seen.push(s.epoch)
    })
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
}

/// Predicts a fixed class per sample from the first pixel.
struct Lookup {
    shape: Vec<usize>,
    table: Option<usize>,
}

impl Classifier for Lookup {
    fn kind(&self) -> ModelKind {
        ModelKind::Ann
    }
    fn num_classes(&self) -> usize {
        10
    }
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        let mut out = Tensor::zeros(&[n, 10]);
        for i in 0..n {
            let class = self.table.unwrap_or(x.row(i)[0] as usize);
            out.row_mut(i)[class] = 1.0;
        }
        Ok(out)
    }
    fn input_gradient(&self, _x: &Tensor, _o: Objective<'_>) -> Result<InputGradient> {
        unimplemented!()
    }
}

fn labelled(labels: &[usize], first_pixel: &[f32]) -> Dataset {
    let images = Tensor::new(vec![labels.len(), 1], first_pixel.to_vec()).unwrap();
    Dataset::new(images, labels.to_vec(), 10).unwrap()
}

#[test]
fn evaluate_fixtures() {
    let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
    let pixels: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
    let data = labelled(&labels, &pixels);
    let perfect = Lookup { shape: vec![1], table: None };
    assert_eq!(evaluate(&perfect, &data).unwrap().accuracy, 1.0);
    let constant = Lookup { shape: vec![1], table: Some(3) };
    let e = evaluate(&constant, &data).unwrap();
    assert!((e.accuracy - 0.10).abs() < 1e-12);
    assert_eq!(e.class_counts, vec![10; 10]);

    // hand count: predictions 1,2,2,7,0 vs labels 1,2,3,7,4 → 3 of 5
    let data = labelled(&[1, 2, 3, 7, 4], &[1.0, 2.0, 2.0, 7.0, 0.0]);
    let e = evaluate(&perfect, &data).unwrap();
    assert_eq!(e.correct, 3);
    assert!((e.accuracy - 0.6).abs() < 1e-12);
    assert_eq!(e.class_correct[3], 0);
    assert_eq!(e.class_correct[7], 1);
}

#[test]
fn empty_data_is_an_input_error() {
    let empty = Dataset {
        images: Tensor::zeros(&[1, 1]),
        labels: vec![],
        classes: 10,
    };
    let model = Lookup { shape: vec![1], table: Some(0) };
    assert_eq!(evaluate(&model, &empty).unwrap_err().kind(), "input");
}
