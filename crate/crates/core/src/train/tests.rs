use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::Tensor;
use crate::testutil::{toy_dataset, toy_model_config};

fn quick() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 16,
        epochs: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn defaults_follow_recipe() {
    let c = TrainConfig::default();
    assert_eq!((c.lr, c.weight_decay, c.batch_size, c.epochs), (1e-4, 1e-2, 64, 50));
    assert_eq!((c.clip_norm, c.warmup_fraction, c.alpha, c.beta, c.seed), (1.0, 0.05, 0.7, 0.3, 42));
    assert_eq!((c.adam_beta1, c.adam_beta2, c.adam_eps), (0.9, 0.999, 1e-8));
    let bad = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        ..c
    };
    assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
}

#[test]
fn multitask_loss_examples() {
    let y = [0.3, -1.2];
    assert_eq!(multitask_loss(&y, &y, &y, &y, 0.7, 0.3).unwrap(), 0.0);
    assert_eq!(multitask_loss(&[1.0], &[0.0], &[0.5], &[0.5], 0.7, 0.3).unwrap(), 0.7);
    assert!(matches!(
        multitask_loss(&[1.0, 2.0], &[0.0], &[0.5], &[0.5], 0.7, 0.3),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn multitask_loss_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut r = |n: usize| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
    let (yh, y, gh, g) = (r(6), r(6), r(6), r(6));
    let (mut sy, mut sg) = (0.0, 0.0);
    for b in 0..3 {
        for h in 0..2 {
            let i = b * 2 + h;
            sy += (y[i] - yh[i]).powi(2);
            sg += (g[i] - gh[i]).powi(2);
        }
    }
    let want = 0.7 * sy / 6.0 + 0.3 * sg / 6.0;
    assert!((multitask_loss(&yh, &y, &gh, &g, 0.7, 0.3).unwrap() - want).abs() < 1e-12);
}

#[test]
fn loss_gradient_wrt_service_prediction() {
    let batch = FusedWindowBatch {
        inputs: vec![],
        service_targets: vec![0.5, -1.0, 2.0, 0.0],
        cluster_targets: vec![0.1, 0.2, 0.3, 0.4],
        service_index: vec![0, 1],
        strength: vec![1.0, 1.0],
        window: 1,
        horizon: 2,
        target_metric: 0,
    };
    let pred = [1.0, 1.5, -0.5, 0.25];
    let mut tape = Tape::new();
    let y = tape.leaf(&Tensor::new(vec![2, 2], pred.to_vec()).unwrap().with_grad());
    let g = tape.leaf(&Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap().with_grad());
    let loss = multitask_loss_var(&mut tape, y, g, &batch, 0.7, 0.3).unwrap();
    tape.backward(loss).unwrap();
    for (i, d) in tape.grad(y).unwrap().iter().enumerate() {
        let want = 2.0 * 0.7 * (pred[i] - batch.service_targets[i]) / 4.0;
        assert!((d - want).abs() < 1e-15);
    }
}

#[test]
fn schedule_landmarks() {
    let c = TrainConfig::default();
    let total = 1000;
    let w = warmup_steps(total, c.warmup_fraction);
    assert_eq!(w, 50);
    assert_eq!(lr_at_step(0, total, &c).unwrap(), 0.0);
    assert_eq!(lr_at_step(w, total, &c).unwrap(), c.lr);
    assert!(lr_at_step(total, total, &c).unwrap().abs() < 1e-20);
    let total = 1040;
    let w = warmup_steps(total, c.warmup_fraction);
    assert_eq!((total - w) % 2, 0);
    let mid = w + (total - w) / 2;
    assert!((lr_at_step(mid, total, &c).unwrap() - c.lr / 2.0).abs() < 1e-12);
    // Continuity at the junction: the last warmup step approaches the peak
    // as fast as the linear ramp allows, and the first decay step is the peak.
    let before = lr_at_step(w - 1, total, &c).unwrap();
    assert!((c.lr - before - c.lr / w as f64).abs() < 1e-12);
    assert!(matches!(lr_at_step(0, 0, &c), Err(Error::Parameter(_))));
    assert!(lr_at_step(total + 1, total, &c).is_err());
}

#[test]
fn schedule_with_all_warmup() {
    let c = TrainConfig::default();
    assert_eq!(lr_at_step(1, 1, &c).unwrap(), c.lr);
}

#[test]
fn clipping_examples() {
    let mut small = vec![vec![0.3, 0.4]];
    assert_eq!(clip_global_norm(&mut small, 1.0), 0.5);
    assert_eq!(small, vec![vec![0.3, 0.4]]);
    let mut g = vec![vec![3.0, 4.0]];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);
}

proptest! {
    #[test]
    fn clipped_norm_is_threshold(parts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 1..6), 1..5)) {
        let mut g = parts.clone();
        let norm = clip_global_norm(&mut g, 1.0);
        let after = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1.0 {
            prop_assert!((after - 1.0).abs() < 1e-9);
        } else {
            prop_assert_eq!(g, parts);
        }
    }
}

fn scalar_param(v: f64) -> Tensor {
    Tensor::new(vec![1], vec![v]).unwrap().with_grad()
}

#[test]
fn adamw_examples() {
    let c = TrainConfig::default();
    let no_decay = TrainConfig {
        weight_decay: 0.0,
        ..c.clone()
    };
    let mut p = scalar_param(0.8);
    let mut state = OptimizerState::new(&[&p]);
    adamw_step(&mut [&mut p], &[vec![0.0]], &[true], &mut state, 1e-3, &no_decay).unwrap();
    assert_eq!(p.data(), &[0.8]);

    let mut p = scalar_param(0.8);
    let mut state = OptimizerState::new(&[&p]);
    adamw_step(&mut [&mut p], &[vec![1.0]], &[false], &mut state, 1e-3, &c).unwrap();
    assert!((p.data()[0] - (0.8 - 1e-3)).abs() < 1e-6);
    assert_eq!(state.step, 1);

    let mut p = scalar_param(0.8);
    let mut state = OptimizerState::new(&[&p]);
    adamw_step(&mut [&mut p], &[vec![0.0]], &[true], &mut state, 1e-3, &c).unwrap();
    assert_eq!(p.data()[0], 0.8 * (1.0 - 1e-3 * 1e-2));
}

#[test]
fn adamw_matches_closed_form_two_steps() {
    let c = TrainConfig::default();
    let lr = 0.01;
    let mut p = scalar_param(1.0);
    let mut state = OptimizerState::new(&[&p]);
    let grads = [0.5, -2.0];
    let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
    for (k, g) in grads.iter().enumerate() {
        adamw_step(&mut [&mut p], &[vec![*g]], &[true], &mut state, lr, &c).unwrap();
        let t = (k + 1) as i32;
        w *= 1.0 - lr * c.weight_decay;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        w -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
    }
    assert!((p.data()[0] - w).abs() < 1e-12);
}

#[test]
fn training_is_deterministic_and_learns() {
    let data = toy_dataset(400, 8, 2);
    let cfg = toy_model_config(8, 2);
    let run = || train(ForecastModel::new(cfg.clone(), 42).unwrap(), &data, &quick()).unwrap();
    let a = run();
    let b = run();
    assert_eq!(epoch_log_csv(&a.log), epoch_log_csv(&b.log));
    assert_eq!(a.best, b.best);
    assert_eq!(a.steps, 3 * data.train.len().div_ceil(16));
    assert!(a.log.last().unwrap().train_loss < a.log[0].train_loss);
    assert!(a.log.iter().all(|r| r.seconds == 0.0 && r.train_loss >= 0.0));
    let best = a.log.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_val_loss, best);
    assert_eq!(evaluate_loss(&a.best, &data, &data.val, &quick()).unwrap(), best);
    assert!((a.log.last().unwrap().lr_last).abs() < 1e-20);
}

#[test]
fn frozen_training_keeps_parameters() {
    let data = toy_dataset(300, 6, 2);
    let mcfg = crate::model::ModelConfig {
        dropout: 0.0,
        ..toy_model_config(6, 2)
    };
    let model = ForecastModel::new(mcfg, 1).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        weight_decay: 0.0,
        ..quick()
    };
    let out = train(model.clone(), &data, &cfg).unwrap();
    assert_eq!(out.best, model);
    let v0 = out.log[0].val_loss;
    assert!(out.log.iter().all(|r| r.val_loss == v0));
    let t0 = out.log[0].train_loss;
    assert!(out.log.iter().all(|r| (r.train_loss - t0).abs() < 1e-12));
}

#[test]
fn divergence_names_the_step() {
    let data = toy_dataset(300, 6, 2);
    let mut model = ForecastModel::new(toy_model_config(6, 2), 1).unwrap();
    model.service_w.data_mut().iter_mut().for_each(|w| *w = 1e300);
    let err = train(model, &data, &quick()).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 1, .. }), "{err}");
}

#[test]
fn epoch_log_format() {
    let rec = EpochRecord {
        epoch: 1,
        train_loss: 0.5,
        val_loss: 0.25,
        lr_last: 1e-4,
        seconds: 0.0,
    };
    assert_eq!(epoch_log_csv(&[rec]), "epoch,train_loss,val_loss,lr_last,seconds\n1,0.5,0.25,0.0001,0\n");
}
