use std::path::Path;
use std::process::Command;

use duoformer::tensor::io as mstf;
use duoformer::trainer::TrainConfig;
use duoformer::{DuoFormerConfig, InputKind, Tensor64};
use duoformer_harness::dataset::SyntheticSpec;
use duoformer_harness::spec::{DatasetSource, ExperimentSpec, GridSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_duoformer"))
}

fn write_spec(dir: &Path, heads: usize) -> std::path::PathBuf {
    let mut model = DuoFormerConfig::desk(4);
    model.input = InputKind::Hierarchy;
    model.tokenizer.embed_dim = 8;
    model.encoder.heads = heads;
    model.encoder.depth = 1;
    let spec = ExperimentSpec {
        model,
        train: TrainConfig {
            max_epochs: 1,
            patience: 1,
            ..TrainConfig::default()
        },
        dataset: DatasetSource::Synthetic(SyntheticSpec::scale_heterogeneous(8, 4, 4, 0.3)),
        repeats: 1,
        seed: 0,
        grid: Some(GridSpec {
            depth: vec![1, 2],
            ..GridSpec::default()
        }),
        save_checkpoints: false,
    };
    let path = dir.join("spec.json");
    std::fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    path
}

fn run(cmd: &mut Command) -> (bool, String) {
    let out = cmd.output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.success(), text)
}

#[test]
fn validate_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write_spec(dir.path(), 2);
    let (success, text) = run(bin().args(["validate", "--config"]).arg(&ok));
    assert!(success, "{text}");
    assert!(text.contains("ok      depth=1"), "{text}");

    let bad = tempfile::tempdir().unwrap();
    let bad = write_spec(bad.path(), 3);
    let (success, text) = run(bin().args(["validate", "--config"]).arg(&bad));
    assert!(!success);
    assert!(text.contains("D=8 not divisible by n_h=3"), "{text}");
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 2);
    let p = |s: &str| dir.path().join(s);

    let (ok, text) = run(bin().args(["synth-data", "--seed", "3", "--config"]).arg(&spec).arg("--out").arg(p("data")));
    assert!(ok, "{text}");
    assert!(p("data/manifest.json").is_file());
    assert!(text.contains("train: 8 items"), "{text}");

    let (ok, text) = run(bin().args(["train", "--config"]).arg(&spec).arg("--out").arg(p("train")));
    assert!(ok, "{text}");
    for f in ["history_train.csv", "test_report.json", "checkpoint/manifest.json", "checkpoint/config.json"] {
        assert!(p("train").join(f).is_file(), "{f}");
    }

    let (ok, text) = run(bin()
        .args(["eval", "--config"])
        .arg(&spec)
        .arg("--checkpoint")
        .arg(p("train/checkpoint")));
    assert!(ok, "{text}");
    assert!(text.contains("balanced_accuracy"), "{text}");

    let (ok, text) = run(bin()
        .args(["export-attn", "--count", "2", "--config"])
        .arg(&spec)
        .arg("--checkpoint")
        .arg(p("train/checkpoint"))
        .arg("--out")
        .arg(p("attn")));
    assert!(ok, "{text}");
    let local: Tensor64 = mstf::read(p("attn/local_0.mstf")).unwrap();
    assert_eq!(local.shape(), &[2, 4, 2, 86, 86]);
    let global: Tensor64 = mstf::read(p("attn/global_0.mstf")).unwrap();
    assert_eq!(global.shape(), &[2, 2, 5, 5]);

    let (ok, text) = run(bin()
        .args(["grid", "--repeats", "2", "--device-threads", "2", "--config"])
        .arg(&spec)
        .arg("--out")
        .arg(p("grid")));
    assert!(ok, "{text}");
    assert!(text.contains("depth=2"), "{text}");
    let rows = duoformer_harness::experiment::read_results(&p("grid/results.csv")).unwrap();
    assert_eq!(rows.len(), 6);
}

#[test]
fn missing_config_is_an_error() {
    let (ok, text) = run(bin().args(["grid", "--config", "/nonexistent/spec.json"]));
    assert!(!ok);
    assert!(text.contains("/nonexistent/spec.json"), "{text}");
}
