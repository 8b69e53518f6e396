use super::*;
use crate::backbone::synthetic::{synthetic_hierarchy, SignalSpec};
use crate::model::{DuoFormerConfig, InputKind};
use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

#[test]
fn cross_entropy_examples() {
    let uniform = Tensor::<f64>::zeros([3, 4]);
    let l = cross_entropy(&uniform, &[0, 1, 3]).unwrap().item();
    assert!((l - 4f64.ln()).abs() < 1e-15);
    let sharp = Tensor::<f64>::from_f64([1, 3], &[0.0, 60.0, 0.0]).unwrap();
    assert!(cross_entropy(&sharp, &[1]).unwrap().item() < 1e-25);
    assert!(matches!(
        cross_entropy(&uniform, &[0, 1, 4]),
        Err(Error::LabelOutOfRange { label: 4, classes: 4 })
    ));
}

/// Direct `log Σ exp − x_y` with compensated summation, no max shift.
fn ce_oracle(row: &[f64], label: usize) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in row {
        let y = x.exp() - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum.ln() - row[label]
}

#[test]
fn cross_entropy_matches_oracle() {
    let mut rng = Rng::new(17);
    for _ in 0..100 {
        let (n, k) = (1 + rng.below(5), 2 + rng.below(6));
        let data: Vec<f64> = rng.normal_vec(n * k, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let got = cross_entropy(&Tensor::from_vec(vec![n, k], data.clone()).unwrap(), &labels).unwrap().item();
        let want: f64 = (0..n).map(|r| ce_oracle(&data[r * k..(r + 1) * k], labels[r])).sum::<f64>() / n as f64;
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

proptest! {
    #[test]
    fn cross_entropy_shift_invariant(seed in any::<u64>(), c in -50.0f64..50.0) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::from_vec(vec![3, 5], rng.normal_vec(15, 2.0)).unwrap();
        let shifted = x.add(&Tensor::scalar(c)).unwrap();
        let a = cross_entropy(&x, &[0, 4, 2]).unwrap().item();
        let b = cross_entropy(&shifted, &[0, 4, 2]).unwrap().item();
        prop_assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn batch_chunks() {
    let order: Vec<usize> = (0..9).collect();
    assert_eq!(batches(&order, 4), vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7, 8]]);
    assert_eq!(batches(&order, 3).len(), 3);
    assert_eq!(batches(&order[..1], 4), vec![vec![0]]);
}

#[test]
fn argmax_ties_take_lowest_index() {
    let t = Tensor::<f64>::from_f64([2, 3], &[1.0, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(argmax_rows(&t), vec![1, 0]);
}

fn tiny_config(classes: usize) -> DuoFormerConfig {
    let mut cfg = DuoFormerConfig::desk(classes);
    cfg.input = InputKind::Hierarchy;
    cfg.tokenizer.embed_dim = 8;
    cfg.encoder.heads = 2;
    cfg.encoder.depth = 1;
    cfg
}

fn split(cfg: &DuoFormerConfig, seed: u64, n: usize, amplitude: f64) -> Split<f64> {
    let classes = cfg.encoder.n_classes;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let spec = SignalSpec::uniform(classes, &[3], amplitude);
    let h = synthetic_hierarchy(seed, &labels, &cfg.backbone, &spec).unwrap();
    Split::new(Inputs::Hierarchies(h), labels).unwrap()
}

fn fast_schedule() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: 20,
        patience: 20,
        seed: 3,
        schedule: LrSchedule::OneCycle(OneCycleConfig {
            peak_lr: 3e-3,
            ..OneCycleConfig::default()
        }),
        ..TrainConfig::default()
    }
}

#[test]
fn separable_two_class_task_is_learned() {
    let cfg = tiny_config(2);
    let train = split(&cfg, 1, 48, 1.0);
    let val = split(&cfg, 2, 24, 1.0);
    let mut model = DuoFormer::<f64>::new(&cfg, 5).unwrap();
    let out = train_loop(&mut model, &train, &val, &fast_schedule()).unwrap();
    assert!(out.best_score >= 0.99, "{:?}", out.history);
    assert!(out.history.len() <= 20);
    let best = out.history.iter().map(|r| r.val_balanced_acc).fold(f64::MIN, f64::max);
    assert_eq!(out.best_score, best);
    // The restored model reproduces the best score.
    assert_eq!(evaluate(&model, &val, 8).unwrap().balanced_accuracy, best);
    let first: f64 = out.history[..2].iter().map(|r| r.train_loss).sum();
    let later: f64 = out.history[3..5].iter().map(|r| r.train_loss).sum();
    assert!(later < first, "{:?}", out.history);
}

#[test]
fn frozen_model_stops_after_patience() {
    let cfg = tiny_config(2);
    let train = split(&cfg, 1, 8, 1.0);
    let val = split(&cfg, 2, 4, 1.0);
    let mut model = DuoFormer::<f64>::new(&cfg, 5).unwrap();
    let before = Snapshot::capture(&model);
    let tc = TrainConfig {
        batch_size: 4,
        max_epochs: 10,
        patience: 1,
        schedule: LrSchedule::Constant { lr: 0.0 },
        ..TrainConfig::default()
    };
    let out = train_loop(&mut model, &train, &val, &tc).unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.best_epoch, 1);
    for ((_, a), (_, b)) in before.params.iter().zip(model.named_params()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = tiny_config(3);
    let train = split(&cfg, 1, 12, 0.5);
    let val = split(&cfg, 2, 6, 0.5);
    let tc = TrainConfig {
        max_epochs: 3,
        ..fast_schedule()
    };
    let run = || {
        let mut m = DuoFormer::<f64>::new(&cfg, 8).unwrap();
        let out = train_loop(&mut m, &train, &val, &tc).unwrap();
        let bits: Vec<u64> = m.named_params().iter().flat_map(|(_, t)| t.data().to_vec()).map(f64::to_bits).collect();
        (out.history, bits)
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
}

#[test]
fn non_finite_loss_aborts() {
    let cfg = tiny_config(2);
    let train = split(&cfg, 1, 8, 1.0);
    let mut model = DuoFormer::<f64>::new(&cfg, 5).unwrap();
    let nan = vec![f64::NAN; model.head.bias.numel()];
    model.head.bias = model.head.bias.with_data(nan).unwrap();
    let err = train_loop(&mut model, &train, &train, &fast_schedule()).err().unwrap();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, step: 0, .. }), "{err}");
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig {
            weight_decay: 0.01,
            ..TrainConfig::default()
        },
        TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn selection_keeps_rows_aligned(seed in any::<u64>()) {
        let cfg = tiny_config(3);
        let s = split(&cfg, seed, 9, 1.0);
        let idx = [4usize, 0, 7];
        let sub = s.select(&idx).unwrap();
        prop_assert!(sub.labels == vec![s.labels[4], s.labels[0], s.labels[7]]);
        if let (Inputs::Hierarchies(a), Inputs::Hierarchies(b)) = (&s.inputs, &sub.inputs) {
            let row = a.stages[2].numel() / 9;
            prop_assert!(b.stages[2].data()[row..2 * row] == a.stages[2].data()[..row]);
        }
    }
}
