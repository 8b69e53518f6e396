//! Deterministic stand-ins for real data: feature hierarchies with a planted
//! class signal, and textured images whose classes differ in spatial scale.

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, FeatureHierarchy, NUM_STAGES};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which stages carry each class's discriminative pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    /// `class_stages[k]` lists the stages where class `k` is planted.
    pub class_stages: Vec<Vec<usize>>,
    /// Pattern strength relative to unit-variance noise.
    pub amplitude: f64,
    /// Seed of the class patterns, shared by every split of a dataset.
    pub pattern_seed: u64,
}

impl SignalSpec {
    /// Every class planted at the same stages.
    pub fn uniform(classes: usize, stages: &[usize], amplitude: f64) -> Self {
        SignalSpec {
            class_stages: vec![stages.to_vec(); classes],
            amplitude,
            pattern_seed: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.class_stages.len()
    }

    fn validate(&self) -> Result<()> {
        if self.class_stages.iter().flatten().any(|&s| s >= NUM_STAGES) {
            return Err(Error::Config("signal stage index out of range".into()));
        }
        Ok(())
    }

    /// Unit-RMS channel direction of class `k` at `stage`.
    fn pattern(&self, class: usize, stage: usize, channels: usize) -> Vec<f64> {
        let mut rng = Rng::derived(self.pattern_seed, &format!("pattern/{class}/{stage}"));
        let v: Vec<f64> = (0..channels).map(|_| rng.normal()).collect();
        let rms = (v.iter().map(|x| x * x).sum::<f64>() / channels as f64).sqrt();
        v.iter().map(|x| x / rms).collect()
    }
}

/// Standard-normal features of the configured shapes with `amplitude ·
/// pattern(label, stage)` added at every spatial position of each stage
/// listed for the sample's class. Sample `i` draws from its own stream, so
/// a sample's values do not depend on the batch it is generated in.
pub fn synthetic_hierarchy<T: Scalar>(
    seed: u64,
    labels: &[usize],
    cfg: &BackboneConfig,
    spec: &SignalSpec,
) -> Result<FeatureHierarchy<T>> {
    spec.validate()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.classes()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: spec.classes(),
        });
    }
    let n = labels.len();
    let sizes = cfg.stage_sizes();
    let patterns: Vec<Vec<Vec<f64>>> = (0..spec.classes())
        .map(|k| {
            (0..NUM_STAGES)
                .map(|s| spec.pattern(k, s, cfg.stage_channels[s]))
                .collect()
        })
        .collect();
    let mut stages: Vec<Vec<T>> = (0..NUM_STAGES)
        .map(|s| Vec::with_capacity(n * cfg.stage_channels[s] * sizes[s] * sizes[s]))
        .collect();
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = Rng::derived(seed, &format!("sample/{i}"));
        for s in 0..NUM_STAGES {
            let planted = spec.class_stages[label].contains(&s);
            let plane = sizes[s] * sizes[s];
            for c in 0..cfg.stage_channels[s] {
                let shift = if planted { spec.amplitude * patterns[label][s][c] } else { 0.0 };
                for _ in 0..plane {
                    stages[s].push(T::lit(rng.normal() + shift));
                }
            }
        }
    }
    let stages = stages
        .into_iter()
        .enumerate()
        .map(|(s, data)| Tensor::from_vec(vec![n, cfg.stage_channels[s], sizes[s], sizes[s]], data))
        .collect::<Result<_>>()?;
    Ok(FeatureHierarchy { stages })
}

/// Oriented sinusoidal gratings; class `k` uses `periods[k]` and
/// `orientations[k]` (0 = varies along x, 1 = along y).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub periods: Vec<f64>,
    pub orientations: Vec<u8>,
    pub amplitude: f64,
    pub noise: f64,
}

impl TextureSpec {
    /// Alternates fine (period 4 px) and coarse (period `H/2`) gratings,
    /// switching orientation every two classes.
    pub fn fine_coarse(classes: usize, image_size: usize) -> Self {
        TextureSpec {
            periods: (0..classes)
                .map(|k| if k % 2 == 0 { 4.0 } else { image_size as f64 / 2.0 })
                .collect(),
            orientations: (0..classes).map(|k| ((k / 2) % 2) as u8).collect(),
            amplitude: 1.0,
            noise: 0.5,
        }
    }

    pub fn classes(&self) -> usize {
        self.periods.len()
    }
}

/// One `[channels, H, H]` textured image (random phase, per-channel gain)
/// for class `label`.
pub fn synthetic_image(rng: &mut Rng, label: usize, channels: usize, size: usize, spec: &TextureSpec) -> Vec<f64> {
    let period = spec.periods[label];
    let along_y = spec.orientations[label] == 1;
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let gains: Vec<f64> = (0..channels).map(|_| rng.uniform_range(0.6, 1.4)).collect();
    let mut out = Vec::with_capacity(channels * size * size);
    for &g in &gains {
        for y in 0..size {
            for x in 0..size {
                let coord = if along_y { y } else { x } as f64;
                let wave = (std::f64::consts::TAU * coord / period + phase).sin();
                out.push(spec.amplitude * g * wave + spec.noise * rng.normal());
            }
        }
    }
    out
}
