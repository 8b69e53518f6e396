use std::fs;

use duoformer::backbone::BackboneConfig;
use duoformer::trainer::Inputs;
use duoformer::InputKind;
use duoformer_harness::dataset::{
    generate_synthetic, load_manifest, make_synthetic_dataset, DatasetManifest, SyntheticSpec,
};

fn backbone() -> BackboneConfig {
    BackboneConfig::default()
}

fn bits(inputs: &Inputs<f64>) -> Vec<u64> {
    match inputs {
        Inputs::Images(t) => t.data().iter().map(|v| v.to_bits()).collect(),
        Inputs::Hierarchies(h) => h.stages.iter().flat_map(|s| s.data().iter().map(|v| v.to_bits())).collect(),
    }
}

#[test]
fn balanced_four_by_hundred() {
    let spec = SyntheticSpec::scale_heterogeneous(400, 4, 4, 0.3);
    let dir = tempfile::tempdir().unwrap();
    let m = make_synthetic_dataset(&spec, &backbone(), 1, dir.path()).unwrap();
    assert_eq!(m.splits.train.len(), 400);
    for k in 0..4 {
        assert_eq!(m.splits.train.iter().filter(|i| i.label == k).count(), 100);
    }
    assert_eq!(m.class_names.len(), 4);
    assert_eq!(m.input, InputKind::Hierarchy);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let spec = SyntheticSpec::fine_coarse_images(2, 64, 6, 2, 2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    make_synthetic_dataset(&spec, &backbone(), 5, a.path()).unwrap();
    make_synthetic_dataset(&spec, &backbone(), 5, b.path()).unwrap();
    let text = fs::read(a.path().join("manifest.json")).unwrap();
    assert_eq!(text, fs::read(b.path().join("manifest.json")).unwrap());
    let manifest: DatasetManifest = serde_json::from_slice(&text).unwrap();
    for item in manifest.splits.train.iter().chain(&manifest.splits.test) {
        let f = item.tensor_file.as_ref().unwrap();
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    let c = tempfile::tempdir().unwrap();
    make_synthetic_dataset(&spec, &backbone(), 6, c.path()).unwrap();
    let f = manifest.splits.train[0].tensor_file.as_ref().unwrap();
    assert_ne!(fs::read(a.path().join(f)).unwrap(), fs::read(c.path().join(f)).unwrap());
}

#[test]
fn manifest_roundtrip_matches_memory() {
    for spec in [
        SyntheticSpec::scale_heterogeneous(5, 3, 2, 0.5),
        SyntheticSpec::fine_coarse_images(3, 64, 4, 3, 3),
    ] {
        let dir = tempfile::tempdir().unwrap();
        make_synthetic_dataset(&spec, &backbone(), 9, dir.path()).unwrap();
        let loaded = load_manifest(dir.path().join("manifest.json")).unwrap();
        let fresh = generate_synthetic(&spec, &backbone(), 9).unwrap();
        for (a, b) in [(&loaded.train, &fresh.train), (&loaded.val, &fresh.val), (&loaded.test, &fresh.test)] {
            assert_eq!(a.labels, b.labels);
            assert_eq!(bits(&a.inputs), bits(&b.inputs));
        }
        loaded.check_model(&backbone(), spec.input_kind(), spec.classes()).unwrap();
    }
}

#[test]
fn imbalanced_counts() {
    let spec = SyntheticSpec {
        class_proportions: Some(vec![3.0, 1.0, 1.0, 1.0]),
        ..SyntheticSpec::scale_heterogeneous(60, 6, 6, 0.3)
    };
    let d = generate_synthetic(&spec, &backbone(), 0).unwrap();
    let count = |k| d.train.labels.iter().filter(|&&l| l == k).count();
    assert_eq!([count(0), count(1), count(2), count(3)], [30, 10, 10, 10]);
    let bad = SyntheticSpec {
        class_proportions: Some(vec![1.0, 1.0]),
        ..spec
    };
    assert!(generate_synthetic(&bad, &backbone(), 0).is_err());
}

#[test]
fn corrupt_manifests_are_rejected_with_paths() {
    let spec = SyntheticSpec::scale_heterogeneous(4, 2, 2, 0.3);
    let dir = tempfile::tempdir().unwrap();
    let mut m = make_synthetic_dataset(&spec, &backbone(), 2, dir.path()).unwrap();
    let path = dir.path().join("manifest.json");

    m.splits.val[0].label = 7;
    fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    let err = load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("label 7"), "{err}");

    m.splits.val[0].label = 1;
    let missing = m.splits.test[1].stage_files.as_ref().unwrap()[2].clone();
    fs::remove_file(dir.path().join(&missing)).unwrap();
    fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    let err = load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains(&missing), "{err}");

    let err = load_manifest(dir.path().join("nope.json")).unwrap_err().to_string();
    assert!(err.contains("nope.json"), "{err}");
}

#[test]
fn model_mismatch_is_reported() {
    let d = generate_synthetic(&SyntheticSpec::scale_heterogeneous(2, 2, 2, 0.3), &backbone(), 0).unwrap();
    assert!(d.check_model(&backbone(), InputKind::Image, 4).is_err());
    assert!(d.check_model(&backbone(), InputKind::Hierarchy, 3).is_err());
    let wide = BackboneConfig {
        stage_channels: [8, 32, 64, 128],
        ..backbone()
    };
    assert!(d.check_model(&wide, InputKind::Hierarchy, 4).is_err());
}
