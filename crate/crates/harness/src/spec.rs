//! Experiment specifications and grid expansion.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use duoformer::attention::AttentionMode;
use duoformer::scale_token::ScaleTokenMode;
use duoformer::trainer::TrainConfig;
use duoformer::DuoFormerConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticSpec;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// A `manifest.json`; relative paths resolve against the spec file.
    Manifest { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub model: DuoFormerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub dataset: DatasetSource,
    #[serde(default = "one")]
    pub repeats: usize,
    /// Base seed every run seed is derived from.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub save_checkpoints: bool,
}

fn one() -> usize {
    1
}

impl ExperimentSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut spec: ExperimentSpec = serde_json::from_str(&text).map_err(|e| HarnessError::json(path, e))?;
        if let DatasetSource::Manifest { path: m } = &mut spec.dataset {
            if m.is_relative() {
                if let Some(dir) = path.parent() {
                    *m = dir.join(&*m);
                }
            }
        }
        Ok(spec)
    }

    /// Spec-level checks that do not depend on any single grid point.
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(HarnessError::Spec("repeats must be positive".into()));
        }
        self.train.validate()?;
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
            if s.input_kind() != self.model.input {
                return Err(HarnessError::Spec(format!(
                    "synthetic dataset produces {:?} inputs but the model expects {:?}",
                    s.input_kind(),
                    self.model.input
                )));
            }
        }
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        Ok(())
    }

    /// Grid points in expansion order; a spec without a grid has one point.
    pub fn points(&self) -> Vec<GridPoint> {
        match &self.grid {
            Some(g) => g.expand(),
            None => vec![GridPoint::base()],
        }
    }
}

/// Every violated model constraint; empty when the configuration is usable.
pub fn validate_config(cfg: &DuoFormerConfig) -> std::result::Result<(), Vec<String>> {
    let v = cfg.violations();
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Cartesian product of all listed axes.
    #[default]
    Factorial,
    /// Each axis swept alone with the others at their base values.
    OneAtATime,
}

/// Values per axis; an empty list leaves the axis at the base configuration.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub scale_subset: Vec<Vec<usize>>,
    #[serde(default)]
    pub scale_token_mode: Vec<ScaleTokenMode>,
    #[serde(default)]
    pub heads: Vec<usize>,
    #[serde(default)]
    pub depth: Vec<usize>,
    #[serde(default)]
    pub attention_mode: Vec<AttentionMode>,
}

/// The 15 nonempty subsets of `{0, 1, 2, 3}`, smallest first.
pub fn all_scale_subsets() -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (1u32..16)
        .map(|mask| (0..4).filter(|s| mask & (1 << s) != 0).collect())
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        let axes = [
            self.scale_subset.len(),
            self.scale_token_mode.len(),
            self.heads.len(),
            self.depth.len(),
            self.attention_mode.len(),
        ];
        if axes.iter().all(|&n| n == 0) {
            return Err(HarnessError::Spec("grid lists no axis values".into()));
        }
        Ok(())
    }

    pub fn expand(&self) -> Vec<GridPoint> {
        let axes: [Vec<Option<AxisValue>>; 5] = [
            self.scale_subset.iter().cloned().map(AxisValue::ScaleSubset).map(Some).collect(),
            self.scale_token_mode.iter().copied().map(AxisValue::ScaleTokenMode).map(Some).collect(),
            self.heads.iter().copied().map(AxisValue::Heads).map(Some).collect(),
            self.depth.iter().copied().map(AxisValue::Depth).map(Some).collect(),
            self.attention_mode.iter().copied().map(AxisValue::AttentionMode).map(Some).collect(),
        ];
        let combos: Vec<Vec<AxisValue>> = match self.sweep {
            Sweep::Factorial => {
                let mut acc: Vec<Vec<AxisValue>> = vec![vec![]];
                for axis in axes.iter().filter(|a| !a.is_empty()) {
                    acc = acc
                        .iter()
                        .flat_map(|prefix| {
                            axis.iter().map(move |v| {
                                let mut p = prefix.clone();
                                p.extend(v.clone());
                                p
                            })
                        })
                        .collect();
                }
                acc
            }
            Sweep::OneAtATime => axes.iter().flatten().map(|v| v.iter().cloned().collect()).collect(),
        };
        combos
            .into_iter()
            .enumerate()
            .map(|(index, values)| GridPoint { index, values })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AxisValue {
    ScaleSubset(Vec<usize>),
    ScaleTokenMode(ScaleTokenMode),
    Heads(usize),
    Depth(usize),
    AttentionMode(AttentionMode),
}

impl AxisValue {
    pub fn axis(&self) -> &'static str {
        match self {
            AxisValue::ScaleSubset(_) => "scale_subset",
            AxisValue::ScaleTokenMode(_) => "scale_token_mode",
            AxisValue::Heads(_) => "heads",
            AxisValue::Depth(_) => "depth",
            AxisValue::AttentionMode(_) => "attention_mode",
        }
    }

    pub fn render(&self) -> String {
        match self {
            AxisValue::ScaleSubset(s) => subset_label(s),
            AxisValue::ScaleTokenMode(m) => m.name().to_string(),
            AxisValue::Heads(h) => h.to_string(),
            AxisValue::Depth(d) => d.to_string(),
            AxisValue::AttentionMode(m) => m.name().to_string(),
        }
    }

    fn apply(&self, cfg: &mut DuoFormerConfig) {
        match self {
            AxisValue::ScaleSubset(s) => cfg.tokenizer.scale_subset = s.clone(),
            AxisValue::ScaleTokenMode(m) => cfg.scale_token.mode = *m,
            AxisValue::Heads(h) => cfg.encoder.heads = *h,
            AxisValue::Depth(d) => cfg.encoder.depth = *d,
            AxisValue::AttentionMode(m) => cfg.attention = *m,
        }
    }
}

/// `[0, 1, 3]` → `"0+1+3"`.
pub fn subset_label(s: &[usize]) -> String {
    let parts: Vec<String> = s.iter().map(|x| x.to_string()).collect();
    parts.join("+")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridPoint {
    /// Position in expansion order; rows are written in this order.
    pub index: usize,
    pub values: Vec<AxisValue>,
}

impl GridPoint {
    pub fn base() -> Self {
        GridPoint {
            index: 0,
            values: Vec::new(),
        }
    }

    /// `axis=value` pairs joined by `,`; `"base"` for the unmodified config.
    pub fn key(&self) -> String {
        if self.values.is_empty() {
            return "base".into();
        }
        let mut out = String::new();
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}={}", v.axis(), v.render());
        }
        out
    }

    pub fn apply(&self, base: &DuoFormerConfig) -> DuoFormerConfig {
        let mut cfg = base.clone();
        for v in &self.values {
            v.apply(&mut cfg);
        }
        cfg
    }
}
