mod common;

use capsroute::data::{epoch_stream, AugmentConfig, StreamMode};
use capsroute::model::{apply_norm_stats, build_mnist_spec, count_params, loss_and_grad, loss_value, ModelParams};
use capsroute::train::{adam_step, evaluate, fit, AdamConfig, Checkpoint, OptimizerState, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn plain() -> StreamMode {
    StreamMode::Mnist {
        augment: AugmentConfig::identity(),
    }
}

#[test]
fn frozen_batch_loss_strictly_decreases() {
    let spec = build_mnist_spec();
    let data = common::synthetic(16, 0);
    let batch = epoch_stream(&data, plain(), 10, 0, 0, 16, false).unwrap().next().unwrap();
    let mut params = ModelParams::<f32>::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut opt = OptimizerState::new(&params);
    let mut losses = vec![loss_value(&spec, &params, &batch).unwrap().total];
    for step in 0..20 {
        let (_, grads, _) = loss_and_grad(&spec, &params, &batch).unwrap();
        adam_step(&mut params, &grads, &mut opt, &AdamConfig::default(), 5e-4, step).unwrap();
        losses.push(loss_value(&spec, &params, &batch).unwrap().total);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn one_step_touches_every_trainable_scalar() {
    let spec = build_mnist_spec();
    let census = count_params(&spec).unwrap();
    let data = common::synthetic(4, 1);
    let batch = epoch_stream(&data, plain(), 10, 0, 0, 4, false).unwrap().next().unwrap();
    let mut params = ModelParams::<f32>::init(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let before = params.clone();
    let mut opt = OptimizerState::new(&params);
    let (_, grads, out) = loss_and_grad(&spec, &params, &batch).unwrap();
    apply_norm_stats(&mut params, &out.norm_stats);
    let touched = adam_step(&mut params, &grads, &mut opt, &AdamConfig::default(), 5e-4, 0).unwrap();
    assert_eq!(touched, census.total + census.decoder);
    let body: usize = grads
        .tensors
        .iter()
        .filter(|(n, _)| !n.starts_with("decoder"))
        .map(|(_, g)| g.len())
        .sum();
    assert_eq!(body, census.total);
    let moved = before
        .iter()
        .zip(params.iter())
        .filter(|((_, a), (_, b))| a != b)
        .count();
    assert_eq!(moved, params.tensor_count());
}

#[test]
fn smoke_fit_learns_and_reloads() {
    let spec = build_mnist_spec();
    let train = common::synthetic(1000, 0);
    let test = common::synthetic(200, 5);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        seed: 4,
        checkpoint_dir: dir.path().to_path_buf(),
        ..TrainConfig::mnist()
    };
    let report = fit(&spec, &cfg, &train, &test).unwrap();

    let init = ModelParams::<f32>::init(&spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let mean_loss = |p: &ModelParams<f32>| {
        let stream = epoch_stream(&train, plain(), 10, 0, 0, 100, false).unwrap();
        let losses: Vec<f64> = stream.map(|b| loss_value(&spec, p, &b).unwrap().total).collect();
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    assert!(mean_loss(&report.params) < 0.5 * mean_loss(&init));

    let mut log = csv::Reader::from_path(&report.log_path).unwrap();
    let headers: Vec<String> = log.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        headers,
        ["epoch", "mean_total_loss", "mean_margin_loss", "mean_recon_loss", "test_error", "lr"]
    );
    assert_eq!(log.records().count(), 1);

    let best = Checkpoint::load(&report.best_path).unwrap();
    let again = evaluate(&spec, &best.params, &test, &cfg.test_mode(), cfg.test_seed, 1, true).unwrap();
    assert_eq!(again.error, report.best_error);
    let last = Checkpoint::load(&report.final_path).unwrap();
    assert!(last.optimizer.is_some() && best.optimizer.is_none());
    assert_eq!(last.params, report.params);
}
