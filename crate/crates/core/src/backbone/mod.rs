//! Convolutional feature extractor producing the four-stage hierarchy.
//!
//! A compact ResNet-style stand-in: a stride-4 stem (3×3 stride-2 conv, ReLU,
//! 2×2 max pool) followed by four stages of residual 3×3 blocks. Stage 0
//! keeps the stem resolution; every later stage opens with a block whose main
//! path is a stride-2 3×3 conv and whose shortcut is a 1×1 stride-2 conv.
//! The tapped output of each stage is the activation after its last block.

pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Module};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub blocks_per_stage: usize,
}

fn default_in_channels() -> usize {
    3
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 64,
            in_channels: 3,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: 1,
        }
    }
}

impl BackboneConfig {
    /// `Pᵢ = H / (4·2ⁱ)`.
    pub fn stage_size(&self, stage: usize) -> usize {
        self.image_size / (4 << stage)
    }

    pub fn stage_sizes(&self) -> [usize; NUM_STAGES] {
        std::array::from_fn(|i| self.stage_size(i))
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a positive multiple of 32",
                self.image_size
            )));
        }
        if self.stage_channels.contains(&0) || self.blocks_per_stage == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts and blocks_per_stage must be positive".into()));
        }
        Ok(())
    }
}

/// Per-stage feature maps, stage `i` shaped `[n, Cᵢ, Pᵢ, Pᵢ]`.
#[derive(Clone, Debug)]
pub struct FeatureHierarchy<T: Scalar> {
    pub stages: Vec<Tensor<T>>,
}

impl<T: Scalar> FeatureHierarchy<T> {
    pub fn batch(&self) -> usize {
        self.stages[0].dim(0)
    }

    pub fn spatial_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.dim(2)).collect()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.dim(1)).collect()
    }

    /// Checks the shape invariants against `cfg` for a batch of `n`.
    pub fn check(&self, cfg: &BackboneConfig) -> Result<()> {
        if self.stages.len() != NUM_STAGES {
            return Err(Error::Config(format!("expected 4 stages, got {}", self.stages.len())));
        }
        let n = self.batch();
        for (i, s) in self.stages.iter().enumerate() {
            let p = cfg.stage_size(i);
            let want = [n, cfg.stage_channels[i], p, p];
            if s.shape() != want {
                return Err(Error::shape("feature hierarchy", s.shape(), &want));
            }
        }
        Ok(())
    }

    /// Rows `[start, start + len)` of every stage.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        Ok(FeatureHierarchy {
            stages: self
                .stages
                .iter()
                .map(|s| s.narrow(0, start, len))
                .collect::<Result<_>>()?,
        })
    }

    pub fn concat_batch(parts: &[FeatureHierarchy<T>]) -> Result<Self> {
        let stages = (0..NUM_STAGES)
            .map(|i| {
                let ts: Vec<Tensor<T>> = parts.iter().map(|p| p.stages[i].clone()).collect();
                Tensor::concat(&ts, 0)
            })
            .collect::<Result<_>>()?;
        Ok(FeatureHierarchy { stages })
    }
}

/// `relu(x + conv2(relu(conv1(x))))`, with an optional projection shortcut.
pub struct ResidualBlock<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub shortcut: Option<Conv2d<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new(rng: &mut Rng, c_in: usize, c_out: usize, downsample: bool) -> Self {
        let stride = if downsample { 2 } else { 1 };
        let shortcut = (downsample || c_in != c_out).then(|| Conv2d::new(rng, c_in, c_out, 1, stride, 0));
        ResidualBlock {
            conv1: Conv2d::new(rng, c_in, c_out, 3, stride, 1),
            conv2: Conv2d::new(rng, c_out, c_out, 3, 1, 1),
            shortcut,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.forward(x)?.relu();
        let h = self.conv2.forward(&h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?.relu())
    }
}

impl<T: Scalar> Module<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.shortcut.visit(&join(prefix, "shortcut"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.shortcut.visit_mut(&join(prefix, "shortcut"), f);
    }
}

pub struct Backbone<T: Scalar> {
    pub cfg: BackboneConfig,
    pub stem: Conv2d<T>,
    pub stages: Vec<Vec<ResidualBlock<T>>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.stage_channels;
        let stem = Conv2d::new(rng, cfg.in_channels, c[0], 3, 2, 1);
        let stages = (0..NUM_STAGES)
            .map(|i| {
                let c_in = if i == 0 { c[0] } else { c[i - 1] };
                (0..cfg.blocks_per_stage)
                    .map(|b| {
                        if b == 0 {
                            ResidualBlock::new(rng, c_in, c[i], i > 0)
                        } else {
                            ResidualBlock::new(rng, c[i], c[i], false)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Backbone {
            cfg: cfg.clone(),
            stem,
            stages,
        })
    }

    /// Turns every parameter into a non-trainable leaf.
    pub fn freeze(&mut self) {
        self.visit_mut("", &mut |_, t| *t = t.detach());
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<FeatureHierarchy<T>> {
        let h = self.cfg.image_size;
        let want = [image.shape().first().copied().unwrap_or(0), self.cfg.in_channels, h, h];
        if image.rank() != 4 || image.shape() != want {
            return Err(Error::shape("backbone input", image.shape(), &want));
        }
        let mut x = self.stem.forward(image)?.relu().maxpool2d(2, 2)?;
        let mut taps = Vec::with_capacity(NUM_STAGES);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x)?;
            }
            taps.push(x.clone());
        }
        Ok(FeatureHierarchy { stages: taps })
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests;
