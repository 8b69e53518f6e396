//! Parameter snapshots and their on-disk form.
//!
//! A checkpoint directory holds `manifest.json` (tensor names → files),
//! one MSTF file per parameter and per batch-norm statistic under
//! `tensors/`, and `config.json` with the model configuration so the
//! directory is self-describing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DuoFormer, DuoFormerConfig};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::{io, RunningStats, Tensor};

pub const FORMAT: &str = "duoformer-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub params: Vec<ManifestEntry>,
    /// Batch-norm running statistics, stored as `<name>.mean` / `<name>.var`.
    pub buffers: Vec<ManifestEntry>,
}

/// Detached copy of every parameter and batch-norm buffer of a module.
#[derive(Clone, Debug)]
pub struct Snapshot<T: Scalar> {
    pub params: Vec<(String, Tensor<T>)>,
    pub buffers: Vec<(String, RunningStats<T>)>,
}

impl<T: Scalar> Snapshot<T> {
    pub fn capture<M: Module<T> + ?Sized>(m: &M) -> Self {
        let params = m.named_params().into_iter().map(|(n, t)| (n, t.detach())).collect();
        let mut buffers = Vec::new();
        m.visit_buffers("", &mut |n, b| buffers.push((n, b.lock().expect("buffer lock").clone())));
        Snapshot { params, buffers }
    }

    /// Writes the snapshot back; parameters keep their trainability.
    pub fn restore<M: Module<T> + ?Sized>(&self, m: &mut M) -> Result<()> {
        let mut missing: Vec<&str> = self.params.iter().map(|(n, _)| n.as_str()).collect();
        let mut err = None;
        m.visit_mut("", &mut |name, t| match self.params.iter().find(|(n, _)| *n == name) {
            Some((_, saved)) if saved.shape() == t.shape() => {
                let fresh = saved.detach();
                *t = if t.requires_grad() { fresh.into_param() } else { fresh };
                missing.retain(|n| *n != name);
            }
            Some((_, saved)) => {
                err.get_or_insert(Error::shape("restore", t.shape(), saved.shape()));
            }
            None => {
                err.get_or_insert(Error::Format(format!("snapshot lacks parameter {name}")));
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = missing.first() {
            return Err(Error::Format(format!("snapshot parameter {extra} has no slot in the model")));
        }
        m.visit_buffers("", &mut |name, b| {
            if let Some((_, s)) = self.buffers.iter().find(|(n, _)| *n == name) {
                *b.lock().expect("buffer lock") = s.clone();
            }
        });
        Ok(())
    }

    fn file_name(name: &str) -> String {
        format!("tensors/{name}.mstf")
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
        let dir = dir.as_ref();
        let mut manifest = CheckpointManifest {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            params: Vec::new(),
            buffers: Vec::new(),
        };
        for (name, t) in &self.params {
            let file = Self::file_name(name);
            io::write(dir.join(&file), t)?;
            manifest.params.push(ManifestEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        for (name, s) in &self.buffers {
            for (suffix, v) in [("mean", &s.mean), ("var", &s.var)] {
                let full = format!("{name}.{suffix}");
                let file = Self::file_name(&full);
                io::write(dir.join(&file), &Tensor::from_vec(vec![v.len()], v.clone())?)?;
                manifest.buffers.push(ManifestEntry {
                    name: full,
                    file,
                    shape: vec![v.len()],
                });
            }
        }
        write_json(dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest = read_json(dir.join("manifest.json"))?;
        if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        let read_entry = |e: &ManifestEntry| -> Result<Tensor<T>> {
            let t = io::read::<T>(dir.join(&e.file))?;
            if t.shape() != e.shape {
                return Err(Error::Format(format!("{}: shape {:?} != manifest {:?}", e.file, t.shape(), e.shape)));
            }
            Ok(t)
        };
        let params = manifest
            .params
            .iter()
            .map(|e| Ok((e.name.clone(), read_entry(e)?)))
            .collect::<Result<_>>()?;
        let mut buffers: Vec<(String, RunningStats<T>)> = Vec::new();
        for pair in manifest.buffers.chunks(2) {
            let [mean, var] = pair else {
                return Err(Error::Format("buffer entries must come in mean/var pairs".into()));
            };
            let name = mean
                .name
                .strip_suffix(".mean")
                .filter(|n| var.name.strip_suffix(".var") == Some(*n))
                .ok_or_else(|| Error::Format(format!("unpaired buffer {}", mean.name)))?;
            buffers.push((
                name.to_string(),
                RunningStats {
                    mean: read_entry(mean)?.data().to_vec(),
                    var: read_entry(var)?.data().to_vec(),
                },
            ));
        }
        Ok(Snapshot { params, buffers })
    }
}

pub fn write_json<S: Serialize>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<D> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl<T: Scalar> DuoFormer<T> {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        Snapshot::capture(self).save(dir)?;
        write_json(dir.join("config.json"), &self.cfg)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg: DuoFormerConfig = read_json(dir.join("config.json"))?;
        let mut model = DuoFormer::new(&cfg, 0)?;
        Snapshot::load(dir)?.restore(&mut model)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::synthetic::{synthetic_hierarchy, SignalSpec};
    use crate::model::InputKind;
    use crate::nn::Mode;

    #[test]
    fn save_load_roundtrip_preserves_outputs() {
        let mut cfg = DuoFormerConfig::desk(4);
        cfg.input = InputKind::Hierarchy;
        let m = DuoFormer::<f64>::new(&cfg, 5).unwrap();
        let h = synthetic_hierarchy(1, &[0, 1, 2], &cfg.backbone, &SignalSpec::uniform(4, &[2], 1.0)).unwrap();
        // Move the batch-norm statistics away from their initial values.
        m.forward_hierarchy(&h, Mode::Train).unwrap();
        let (before, _) = m.forward_hierarchy(&h, Mode::Eval).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = DuoFormer::<f64>::load(dir.path()).unwrap();
        let (after, _) = back.forward_hierarchy(&h, Mode::Eval).unwrap();
        assert_eq!(before.data(), after.data());
        assert_eq!(back.trainable_params().len(), m.trainable_params().len());
        let manifest: CheckpointManifest = read_json(dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.params.len(), m.named_params().len());
        assert_eq!(manifest.buffers.len(), 2);
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let cfg = DuoFormerConfig::desk(3);
        let m = DuoFormer::<f64>::new(&cfg, 2).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        m.save(a.path()).unwrap();
        m.save(b.path()).unwrap();
        for f in ["manifest.json", "config.json", "tensors/head.weight.mstf"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn restore_rejects_mismatched_snapshot() {
        let cfg = DuoFormerConfig::desk(3);
        let mut m = DuoFormer::<f64>::new(&cfg, 2).unwrap();
        let other = DuoFormer::<f64>::new(&DuoFormerConfig::desk(5), 2).unwrap();
        assert!(Snapshot::capture(&other).restore(&mut m).is_err());
        let mut snap = Snapshot::capture(&m);
        snap.params.pop();
        assert!(snap.restore(&mut m).is_err());
    }

    #[test]
    fn missing_checkpoint_reports_path() {
        let err = DuoFormer::<f64>::load("/nonexistent/ckpt").err().unwrap().to_string();
        assert!(err.contains("/nonexistent/ckpt"), "{err}");
    }
}
