//! The per-patch scale token and its ablation alternatives.
//!
//! In `fused` mode every included stage is brought down to the `√N × √N`
//! patch grid (3×3 stride-2 conv + max-pool for stages 0 and 1, max-pool for
//! stage 2, identity for stage 3), the stages are concatenated along
//! channels, and a 1×1 conv, batch norm over the `n·N` positions and ReLU
//! project the result to `D`.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeatureHierarchy};
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm, Conv2d, Linear, Mode, Module};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{RunningStats, Tensor};
use crate::tokenizer::{exact_sqrt, MultiScaleTokens, TokenizerConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleTokenMode {
    #[default]
    Fused,
    FirstToken,
    Average,
    Learnable,
}

impl ScaleTokenMode {
    pub const ALL: [ScaleTokenMode; 4] = [
        ScaleTokenMode::Fused,
        ScaleTokenMode::FirstToken,
        ScaleTokenMode::Average,
        ScaleTokenMode::Learnable,
    ];

    /// Whether a dedicated token is prepended to every patch sequence.
    pub fn prepends(self) -> bool {
        matches!(self, ScaleTokenMode::Fused | ScaleTokenMode::Learnable)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleTokenMode::Fused => "fused",
            ScaleTokenMode::FirstToken => "first_token",
            ScaleTokenMode::Average => "average",
            ScaleTokenMode::Learnable => "learnable",
        }
    }
}

impl std::str::FromStr for ScaleTokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScaleTokenMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scale token mode '{s}'")))
    }
}

/// Spatial recipe that brings stage `stage` of size `p` to a `grid × grid` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downsample {
    ConvPool { pool: usize },
    Pool { pool: usize },
    Identity,
}

pub fn downsample_recipe(stage: usize, p: usize, grid: usize) -> Result<Downsample> {
    let bad = |what: &str| {
        Err(Error::Config(format!(
            "stage {stage} of size {p} cannot reach a {grid}x{grid} grid ({what})"
        )))
    };
    match stage {
        0 | 1 => {
            let half = p.div_ceil(2);
            if p % 2 != 0 || half % grid != 0 {
                return bad("stride-2 conv then max-pool");
            }
            Ok(Downsample::ConvPool { pool: half / grid })
        }
        2 => {
            if p % grid != 0 {
                return bad("max-pool");
            }
            Ok(Downsample::Pool { pool: p / grid })
        }
        3 => {
            if p != grid {
                return bad("identity branch needs P3 == sqrt(N)");
            }
            Ok(Downsample::Identity)
        }
        _ => bad("no such stage"),
    }
}

/// `[n, Cᵢ, Pᵢ, Pᵢ] → [n, N, Cᵢ]`.
pub fn downsample_stage<T: Scalar>(
    x: &Tensor<T>,
    stage: usize,
    patch_count: usize,
    conv: Option<&Conv2d<T>>,
) -> Result<Tensor<T>> {
    let grid = exact_sqrt(patch_count).ok_or_else(|| Error::Config(format!("N={patch_count} not square")))?;
    let (n, c) = (x.dim(0), x.dim(1));
    let reduced = match downsample_recipe(stage, x.dim(2), grid)? {
        Downsample::ConvPool { pool } => {
            let conv = conv.ok_or_else(|| Error::Config(format!("stage {stage} needs a downsample conv")))?;
            conv.forward(x)?.maxpool2d(pool, pool)?
        }
        Downsample::Pool { pool } => x.maxpool2d(pool, pool)?,
        Downsample::Identity => x.clone(),
    };
    reduced.permute(&[0, 2, 3, 1])?.reshape([n, patch_count, c])
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleTokenConfig {
    pub mode: ScaleTokenMode,
    /// Learnable mode only: one `[1, D]` token shared by all patches.
    #[serde(default)]
    pub shared_learnable: bool,
}

pub struct ScaleToken<T: Scalar> {
    pub mode: ScaleTokenMode,
    pub scales: Vec<usize>,
    pub patch_count: usize,
    pub embed_dim: usize,
    /// One entry per included stage; `Some` for stages 0 and 1.
    pub downsample: Vec<Option<Conv2d<T>>>,
    pub fuse: Option<Linear<T>>,
    pub norm: Option<BatchNorm<T>>,
    pub learnable: Option<Tensor<T>>,
}

impl<T: Scalar> ScaleToken<T> {
    pub fn new(cfg: &ScaleTokenConfig, tok: &TokenizerConfig, backbone: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        tok.validate(backbone)?;
        let scales = tok.scales();
        let grid = tok.grid();
        let d = tok.embed_dim;
        let mut st = ScaleToken {
            mode: cfg.mode,
            scales: scales.clone(),
            patch_count: tok.patch_count,
            embed_dim: d,
            downsample: Vec::new(),
            fuse: None,
            norm: None,
            learnable: None,
        };
        match cfg.mode {
            ScaleTokenMode::Fused => {
                let mut total = 0;
                for &s in &scales {
                    let c = backbone.stage_channels[s];
                    total += c;
                    st.downsample.push(match downsample_recipe(s, backbone.stage_size(s), grid)? {
                        Downsample::ConvPool { .. } => Some(Conv2d::new(rng, c, c, 3, 2, 1)),
                        _ => None,
                    });
                }
                st.fuse = Some(Linear::new(rng, total, d));
                st.norm = Some(BatchNorm::new(d));
            }
            ScaleTokenMode::Learnable => {
                let rows = if cfg.shared_learnable { 1 } else { tok.patch_count };
                st.learnable = Some(Tensor::param([rows, d], rng.trunc_normal_vec(rows * d, 0.02))?);
            }
            ScaleTokenMode::FirstToken | ScaleTokenMode::Average => {}
        }
        Ok(st)
    }

    /// Channel-concatenated downsampled stages, `[n, N, ΣCᵢ]`.
    pub fn gather(&self, hier: &FeatureHierarchy<T>) -> Result<Tensor<T>> {
        let parts = self
            .scales
            .iter()
            .zip(&self.downsample)
            .map(|(&s, conv)| downsample_stage(&hier.stages[s], s, self.patch_count, conv.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&parts, 2)
    }

    /// Fused-mode token, `[n, N, D]`, elementwise nonnegative.
    pub fn fuse_scale_token(&self, hier: &FeatureHierarchy<T>, mode: Mode) -> Result<Tensor<T>> {
        let (fuse, norm) = match (&self.fuse, &self.norm) {
            (Some(f), Some(b)) => (f, b),
            _ => return Err(Error::Config("fused scale token parameters missing".into())),
        };
        let cat = self.gather(hier)?;
        let (n, patches, c) = (cat.dim(0), cat.dim(1), cat.dim(2));
        let rows = fuse.forward(&cat.reshape([n * patches, c])?)?;
        norm.forward(&rows, mode)?.relu().reshape([n, patches, self.embed_dim])
    }

    pub fn make_scale_token(
        &self,
        hier: &FeatureHierarchy<T>,
        tokens: &MultiScaleTokens<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let (n, patches, d) = (tokens.batch(), tokens.patches(), tokens.embed_dim());
        match self.mode {
            ScaleTokenMode::Fused => self.fuse_scale_token(hier, mode),
            ScaleTokenMode::FirstToken => tokens
                .tokens
                .narrow(2, tokens.last_scale_offset(), 1)?
                .reshape([n, patches, d]),
            ScaleTokenMode::Average => tokens.tokens.mean_axis(2),
            ScaleTokenMode::Learnable => {
                let p = self.learnable.as_ref().expect("learnable token present in learnable mode");
                p.reshape([1, p.dim(0), d])?.broadcast_to([n, patches, d])
            }
        }
    }
}

impl<T: Scalar> Module<T> for ScaleToken<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (s, c) in self.scales.iter().zip(&self.downsample) {
            c.visit(&join(prefix, &format!("down{s}")), f);
        }
        self.fuse.visit(&join(prefix, "fuse"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.learnable.visit(&join(prefix, "learnable"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (s, c) in self.scales.iter().zip(self.downsample.iter_mut()) {
            c.visit_mut(&join(prefix, &format!("down{s}")), f);
        }
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.learnable.visit_mut(&join(prefix, "learnable"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &std::sync::Mutex<RunningStats<T>>)) {
        self.norm.visit_buffers(&join(prefix, "norm"), f);
    }
}
