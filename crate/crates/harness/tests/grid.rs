use duoformer::attention::AttentionMode;
use duoformer::trainer::{LrSchedule, OneCycleConfig, TrainConfig};
use duoformer::{DuoFormerConfig, InputKind};
use duoformer_harness::dataset::{generate_synthetic, SyntheticSpec};
use duoformer_harness::experiment::{
    mean_std, read_results, run_seed, train_one, ResolvedConfig, RowKind, RunOptions, RESULTS_FILE,
};
use duoformer_harness::spec::{DatasetSource, ExperimentSpec, GridSpec};

fn small_model() -> DuoFormerConfig {
    let mut m = DuoFormerConfig::desk(4);
    m.input = InputKind::Hierarchy;
    m.tokenizer.embed_dim = 8;
    m.encoder.heads = 2;
    m.encoder.depth = 1;
    m
}

fn spec(grid: GridSpec, repeats: usize) -> ExperimentSpec {
    ExperimentSpec {
        model: small_model(),
        train: TrainConfig {
            max_epochs: 2,
            patience: 2,
            ..TrainConfig::default()
        },
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            seed: 3,
            ..SyntheticSpec::scale_heterogeneous(16, 8, 8, 0.3)
        }),
        repeats,
        seed: 11,
        grid: Some(grid),
        save_checkpoints: false,
    }
}

#[test]
fn invalid_points_become_skipped_rows() {
    let s = spec(
        GridSpec {
            heads: vec![2, 3, 4],
            ..GridSpec::default()
        },
        2,
    );
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out: Some(dir.path().to_path_buf()),
        threads: 1,
    };
    let results = duoformer_harness::run_spec(&s, &opts).unwrap();
    let kinds: Vec<(RowKind, &str)> = results.rows.iter().map(|r| (r.row_kind, r.point_key.as_str())).collect();
    assert_eq!(
        kinds,
        vec![
            (RowKind::Run, "heads=2"),
            (RowKind::Run, "heads=2"),
            (RowKind::Aggregate, "heads=2"),
            (RowKind::Skipped, "heads=3"),
            (RowKind::Run, "heads=4"),
            (RowKind::Run, "heads=4"),
            (RowKind::Aggregate, "heads=4"),
        ]
    );
    let skipped = &results.rows[3];
    assert_eq!(skipped.reason.as_deref(), Some("D=8 not divisible by n_h=3"));

    let on_disk = read_results(&dir.path().join(RESULTS_FILE)).unwrap();
    assert_eq!(on_disk, results.rows);
    assert!(dir.path().join("spec.json").is_file());
    assert!(dir.path().join("history_p002_r1.csv").is_file());
    let history = std::fs::read_to_string(dir.path().join("history_p000_r0.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,val_balanced_acc,lr\n"));
}

#[test]
fn rows_echo_the_resolved_config() {
    let s = spec(
        GridSpec {
            attention_mode: vec![AttentionMode::LocalOnly, AttentionMode::Duo],
            ..GridSpec::default()
        },
        1,
    );
    let results = duoformer_harness::run_spec(&s, &RunOptions::default()).unwrap();
    for row in &results.rows {
        let cfg: ResolvedConfig = serde_json::from_str(&row.config_json).unwrap();
        assert_eq!(cfg.model.attention.name(), row.attention_mode);
        let mut expect = small_model();
        expect.attention = cfg.model.attention;
        assert_eq!(cfg.model, expect);
        if row.row_kind == RowKind::Run {
            assert_eq!(Some(cfg.train.seed), row.seed);
            assert_eq!(row.seed, Some(run_seed(11, 0)));
        }
    }
}

#[test]
fn grid_order_does_not_change_runs() {
    let modes = [AttentionMode::LocalOnly, AttentionMode::GlobalOnly, AttentionMode::Duo];
    let forward = spec(
        GridSpec {
            attention_mode: modes.to_vec(),
            ..GridSpec::default()
        },
        1,
    );
    let mut backward = forward.clone();
    backward.grid.as_mut().unwrap().attention_mode.reverse();
    let a = duoformer_harness::run_spec(&forward, &RunOptions::default()).unwrap();
    let b = duoformer_harness::run_spec(&backward, &RunOptions { out: None, threads: 2 }).unwrap();
    for m in modes {
        let key = format!("attention_mode={}", m.name());
        let (ra, rb) = (a.runs_of(&key), b.runs_of(&key));
        assert_eq!(ra.len(), 1);
        assert_eq!(ra[0].test_loss.map(f64::to_bits), rb[0].test_loss.map(f64::to_bits));
        assert_eq!(ra[0].test_recall, rb[0].test_recall);
        assert_eq!(ra[0].config_json, rb[0].config_json);
    }
}

#[test]
fn identical_seed_repeats_have_zero_std() {
    let s = spec(GridSpec::default(), 1);
    let DatasetSource::Synthetic(d) = &s.dataset else { unreachable!() };
    let data = generate_synthetic(d, &s.model.backbone, d.seed).unwrap();
    let scores: Vec<f64> = (0..3)
        .map(|_| train_one(&s.model, &s.train, &data, 42).unwrap().2.balanced_accuracy)
        .collect();
    let (mean, std) = mean_std(&scores);
    assert_eq!(mean, scores[0]);
    assert_eq!(std, Some(0.0));
}

#[test]
fn spec_json_roundtrip_and_validation() {
    let s = spec(
        GridSpec {
            depth: vec![1, 2],
            ..GridSpec::default()
        },
        3,
    );
    let text = serde_json::to_string_pretty(&s).unwrap();
    let back: ExperimentSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, s);

    let mut bad = s.clone();
    bad.repeats = 0;
    assert!(bad.validate().is_err());
    let mut bad = s.clone();
    bad.model.input = InputKind::Image;
    assert!(bad.validate().is_err());
    let mut bad = s;
    bad.grid = Some(GridSpec::default());
    assert!(bad.validate().is_err());
}

/// Classes 2 and 3 differ only at stage 3; dropping that scale should cost
/// them recall.
#[test]
fn coarse_classes_degrade_without_scale_three() {
    let mut model = small_model();
    model.attention = AttentionMode::LocalOnly;
    let s = ExperimentSpec {
        model,
        train: TrainConfig {
            max_epochs: 8,
            patience: 8,
            schedule: LrSchedule::OneCycle(OneCycleConfig {
                peak_lr: 3e-3,
                ..OneCycleConfig::default()
            }),
            ..TrainConfig::default()
        },
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            seed: 4,
            ..SyntheticSpec::scale_heterogeneous(96, 32, 64, 0.3)
        }),
        repeats: 1,
        seed: 5,
        grid: Some(GridSpec {
            scale_subset: vec![vec![0, 1, 2], vec![0, 1, 2, 3]],
            ..GridSpec::default()
        }),
        save_checkpoints: false,
    };
    let r = duoformer_harness::run_spec(&s, &RunOptions::default()).unwrap();
    let without = r.runs_of("scale_subset=0+1+2")[0].recall();
    let with = r.runs_of("scale_subset=0+1+2+3")[0].recall();
    let coarse = |v: &[f64]| (v[2] + v[3]) / 2.0;
    assert!(coarse(&with) > coarse(&without), "with {with:?} without {without:?}");
    assert!(coarse(&without) <= 0.75, "{without:?}");
}
