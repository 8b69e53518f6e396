//! Synthetic dataset generation and the on-disk manifest format.
//!
//! A dataset directory holds `manifest.json` and one MSTF file per sample
//! (images, `[C, H, W]`) or per sample and stage (hierarchies, `[Cᵢ, Pᵢ, Pᵢ]`).

use std::fs;
use std::path::{Path, PathBuf};

use duoformer::backbone::synthetic::{synthetic_hierarchy, synthetic_image, SignalSpec, TextureSpec};
use duoformer::backbone::{BackboneConfig, FeatureHierarchy, NUM_STAGES};
use duoformer::rng::mix_seed;
use duoformer::tensor::io as mstf;
use duoformer::trainer::{Inputs, Split};
use duoformer::{InputKind, Rng, Tensor64};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MANIFEST_FORMAT: &str = "duoformer-dataset";
pub const MANIFEST_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Feature hierarchies with each class planted at its listed stages.
    Hierarchy { class_stages: Vec<Vec<usize>>, amplitude: f64 },
    /// Raw images of oriented gratings with per-class periods.
    Image { texture: TextureSpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Relative class frequencies; balanced when absent.
    #[serde(default)]
    pub class_proportions: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    /// Hierarchy classes `0` and `1` planted at stages 0 and 1; classes 2
    /// and 3 both planted only at stage 3, so telling them apart needs the
    /// coarsest scale.
    pub fn scale_heterogeneous(train: usize, val: usize, test: usize, amplitude: f64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::Hierarchy {
                class_stages: vec![vec![0], vec![1], vec![3], vec![3]],
                amplitude,
            },
            train,
            val,
            test,
            class_proportions: None,
            seed: 0,
        }
    }

    /// Alternating fine and coarse gratings.
    pub fn fine_coarse_images(classes: usize, image_size: usize, train: usize, val: usize, test: usize) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::Image {
                texture: TextureSpec::fine_coarse(classes, image_size),
            },
            train,
            val,
            test,
            class_proportions: None,
            seed: 0,
        }
    }

    pub fn classes(&self) -> usize {
        match &self.kind {
            SyntheticKind::Hierarchy { class_stages, .. } => class_stages.len(),
            SyntheticKind::Image { texture } => texture.classes(),
        }
    }

    pub fn input_kind(&self) -> InputKind {
        match self.kind {
            SyntheticKind::Hierarchy { .. } => InputKind::Hierarchy,
            SyntheticKind::Image { .. } => InputKind::Image,
        }
    }

    pub fn split_size(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes();
        if k < 2 {
            return Err(HarnessError::Spec("synthetic dataset needs at least 2 classes".into()));
        }
        if let SyntheticKind::Image { texture } = &self.kind {
            if texture.orientations.len() != k || texture.periods.iter().any(|&p| p <= 0.0) {
                return Err(HarnessError::Spec("texture periods and orientations must align and be positive".into()));
            }
        }
        if let Some(p) = &self.class_proportions {
            if p.len() != k || p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || p.iter().sum::<f64>() <= 0.0 {
                return Err(HarnessError::Spec(format!(
                    "class_proportions must list {k} nonnegative weights with a positive sum"
                )));
            }
        }
        Ok(())
    }

    /// Per-class sample counts of a split of `total` samples.
    pub fn class_counts(&self, total: usize) -> Vec<usize> {
        let k = self.classes();
        let weights = self.class_proportions.clone().unwrap_or_else(|| vec![1.0; k]);
        class_counts(total, &weights)
    }
}

/// Largest-remainder apportionment of `total` by `weights`; ties in the
/// remainder go to the lower class index.
pub fn class_counts(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Round-robin over classes with samples left, so classes interleave.
pub fn interleaved_labels(counts: &[usize]) -> Vec<usize> {
    let mut left = counts.to_vec();
    let mut out = Vec::with_capacity(counts.iter().sum());
    while left.iter().any(|&c| c > 0) {
        for (k, c) in left.iter_mut().enumerate() {
            if *c > 0 {
                *c -= 1;
                out.push(k);
            }
        }
    }
    out
}

/// A fully loaded dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub input: InputKind,
    pub train: Split<f64>,
    pub val: Split<f64>,
    pub test: Split<f64>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> &Split<f64> {
        match name {
            "train" => &self.train,
            "val" => &self.val,
            _ => &self.test,
        }
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Checks that the data fits a model with this backbone and class count.
    pub fn check_model(&self, backbone: &BackboneConfig, input: InputKind, n_classes: usize) -> Result<()> {
        if input != self.input {
            return Err(HarnessError::Spec(format!(
                "dataset holds {:?} inputs but the model expects {:?}",
                self.input, input
            )));
        }
        if n_classes != self.classes() {
            return Err(HarnessError::Spec(format!(
                "dataset has {} classes but the model head has {n_classes}",
                self.classes()
            )));
        }
        for name in SPLITS.iter().filter(|n| !self.split(n).is_empty()) {
            match &self.split(name).inputs {
                Inputs::Hierarchies(h) => h.check(backbone)?,
                Inputs::Images(t) => {
                    let want = [t.dim(0), backbone.in_channels, backbone.image_size, backbone.image_size];
                    if t.shape() != want {
                        return Err(duoformer::Error::ShapeMismatch {
                            op: "dataset images",
                            lhs: t.shape().to_vec(),
                            rhs: want.to_vec(),
                        }
                        .into());
                    }
                }
            }
        }
        Ok(())
    }

    pub fn require_nonempty(&self) -> Result<()> {
        for name in SPLITS {
            if self.split(name).is_empty() {
                return Err(HarnessError::Spec(format!("split `{name}` is empty")));
            }
        }
        Ok(())
    }
}

fn split_seed(seed: u64, split: &str) -> u64 {
    mix_seed(seed, format!("split/{split}").as_bytes())
}

/// Generates every split in memory. Deterministic in `(spec, backbone, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, backbone: &BackboneConfig, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    backbone.validate()?;
    let make = |split: &str| -> Result<Split<f64>> {
        let labels = interleaved_labels(&spec.class_counts(spec.split_size(split)));
        let s = split_seed(seed, split);
        let inputs = match &spec.kind {
            SyntheticKind::Hierarchy {
                class_stages,
                amplitude,
            } => {
                let signal = SignalSpec {
                    class_stages: class_stages.clone(),
                    amplitude: *amplitude,
                    pattern_seed: seed,
                };
                Inputs::Hierarchies(synthetic_hierarchy(s, &labels, backbone, &signal)?)
            }
            SyntheticKind::Image { texture } => {
                let (c, h) = (backbone.in_channels, backbone.image_size);
                let mut data = Vec::with_capacity(labels.len() * c * h * h);
                for (i, &label) in labels.iter().enumerate() {
                    let mut rng = Rng::derived(s, &format!("sample/{i}"));
                    data.extend(synthetic_image(&mut rng, label, c, h, texture));
                }
                Inputs::Images(Tensor64::from_vec(vec![labels.len(), c, h, h], data)?)
            }
        };
        Ok(Split::new(inputs, labels)?)
    };
    Ok(Dataset {
        class_names: (0..spec.classes()).map(|k| format!("class{k}")).collect(),
        input: spec.input_kind(),
        train: make("train")?,
        val: make("val")?,
        test: make("test")?,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    /// `[C, H, W]` image file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor_file: Option<String>,
    /// One `[Cᵢ, Pᵢ, Pᵢ]` file per backbone stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_files: Option<Vec<String>>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSplits {
    pub train: Vec<ManifestItem>,
    pub val: Vec<ManifestItem>,
    pub test: Vec<ManifestItem>,
}

impl ManifestSplits {
    pub fn get(&self, name: &str) -> &[ManifestItem] {
        match name {
            "train" => &self.train,
            "val" => &self.val,
            _ => &self.test,
        }
    }

    fn get_mut(&mut self, name: &str) -> &mut Vec<ManifestItem> {
        match name {
            "train" => &mut self.train,
            "val" => &mut self.val,
            _ => &mut self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub class_names: Vec<String>,
    pub input: InputKind,
    pub splits: ManifestSplits,
}

/// Row `i` of a batched tensor with the leading axis dropped.
fn row(t: &Tensor64, i: usize) -> Result<Tensor64> {
    let inner: Vec<usize> = t.shape()[1..].to_vec();
    let len: usize = inner.iter().product();
    Ok(Tensor64::from_vec(inner, t.data()[i * len..(i + 1) * len].to_vec())?)
}

/// Writes `dataset` under `dir` and returns the manifest it wrote.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let mut splits = ManifestSplits::default();
    for name in SPLITS {
        let split = dataset.split(name);
        let items = splits.get_mut(name);
        for (i, &label) in split.labels.iter().enumerate() {
            let item = match &split.inputs {
                Inputs::Images(t) => {
                    let file = format!("{name}/{i:05}.mstf");
                    mstf::write(dir.join(&file), &row(t, i)?)?;
                    ManifestItem {
                        tensor_file: Some(file),
                        stage_files: None,
                        label,
                    }
                }
                Inputs::Hierarchies(h) => {
                    let mut files = Vec::with_capacity(NUM_STAGES);
                    for (s, stage) in h.stages.iter().enumerate() {
                        let file = format!("{name}/{i:05}_s{s}.mstf");
                        mstf::write(dir.join(&file), &row(stage, i)?)?;
                        files.push(file);
                    }
                    ManifestItem {
                        tensor_file: None,
                        stage_files: Some(files),
                        label,
                    }
                }
            };
            items.push(item);
        }
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        class_names: dataset.class_names.clone(),
        input: dataset.input,
        splits,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| HarnessError::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    Ok(manifest)
}

/// Generates a synthetic dataset and writes it under `dir`.
pub fn make_synthetic_dataset(
    spec: &SyntheticSpec,
    backbone: &BackboneConfig,
    seed: u64,
    dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    write_dataset(&generate_synthetic(spec, backbone, seed)?, dir)
}

fn stack(path: &Path, parts: &[Tensor64]) -> Result<Tensor64> {
    let Some(first) = parts.first() else {
        return Err(HarnessError::manifest(path, "cannot stack an empty split"));
    };
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * first.numel());
    for p in parts {
        if p.shape() != shape {
            return Err(HarnessError::manifest(
                path,
                format!("inconsistent sample shapes {:?} and {:?}", shape, p.shape()),
            ));
        }
        data.extend_from_slice(p.data());
    }
    let mut full = vec![parts.len()];
    full.extend(shape);
    Ok(Tensor64::from_vec(full, data)?)
}

fn empty_split(input: InputKind) -> Result<Split<f64>> {
    let inputs = match input {
        InputKind::Image => Inputs::Images(Tensor64::from_vec(vec![0, 0, 0, 0], vec![])?),
        InputKind::Hierarchy => Inputs::Hierarchies(FeatureHierarchy {
            stages: (0..NUM_STAGES)
                .map(|_| Tensor64::from_vec(vec![0, 0, 0, 0], vec![]))
                .collect::<duoformer::Result<_>>()?,
        }),
    };
    Ok(Split::new(inputs, vec![])?)
}

/// Reads a manifest and every tensor it references.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| HarnessError::json(path, e))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(HarnessError::manifest(
            path,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    let classes = manifest.class_names.len();
    let root: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let read = |file: &str| -> Result<Tensor64> {
        let p = root.join(file);
        if !p.is_file() {
            return Err(HarnessError::manifest(path, format!("missing tensor file {}", p.display())));
        }
        Ok(mstf::read(&p)?)
    };
    let load_split = |name: &str| -> Result<Split<f64>> {
        let items = manifest.splits.get(name);
        if items.is_empty() {
            return empty_split(manifest.input);
        }
        let mut labels = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.label >= classes {
                return Err(HarnessError::manifest(
                    path,
                    format!("{name}[{i}] has label {} but only {classes} classes", item.label),
                ));
            }
            labels.push(item.label);
        }
        let inputs = match manifest.input {
            InputKind::Image => {
                let parts = items
                    .iter()
                    .enumerate()
                    .map(|(i, item)| match &item.tensor_file {
                        Some(f) => read(f),
                        None => Err(HarnessError::manifest(path, format!("{name}[{i}] lacks tensor_file"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Inputs::Images(stack(path, &parts)?)
            }
            InputKind::Hierarchy => {
                let mut per_stage: Vec<Vec<Tensor64>> = vec![Vec::with_capacity(items.len()); NUM_STAGES];
                for (i, item) in items.iter().enumerate() {
                    let files = match &item.stage_files {
                        Some(f) if f.len() == NUM_STAGES => f,
                        _ => {
                            return Err(HarnessError::manifest(
                                path,
                                format!("{name}[{i}] needs {NUM_STAGES} stage_files"),
                            ))
                        }
                    };
                    for (s, f) in files.iter().enumerate() {
                        per_stage[s].push(read(f)?);
                    }
                }
                Inputs::Hierarchies(FeatureHierarchy {
                    stages: per_stage.iter().map(|p| stack(path, p)).collect::<Result<_>>()?,
                })
            }
        };
        Ok(Split::new(inputs, labels)?)
    };
    Ok(Dataset {
        class_names: manifest.class_names.clone(),
        input: manifest.input,
        train: load_split("train")?,
        val: load_split("val")?,
        test: load_split("test")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportionment() {
        assert_eq!(class_counts(400, &[1.0; 4]), vec![100; 4]);
        assert_eq!(class_counts(10, &[1.0; 4]), vec![3, 3, 2, 2]);
        assert_eq!(class_counts(10, &[3.0, 1.0]), vec![8, 2]);
        for total in 0..50 {
            assert_eq!(class_counts(total, &[0.2, 0.5, 0.3]).iter().sum::<usize>(), total);
        }
    }

    #[test]
    fn labels_interleave() {
        assert_eq!(interleaved_labels(&[2, 1, 3]), vec![0, 1, 2, 0, 2, 2]);
    }
}
