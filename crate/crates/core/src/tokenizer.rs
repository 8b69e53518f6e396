//! Multi-scale patch tokens.
//!
//! Each included stage `xᵢ: [n, Cᵢ, Pᵢ, Pᵢ]` is projected pointwise to `D`
//! channels, cut into a `√N × √N` grid of non-overlapping patches (patches
//! and the positions inside a patch both in row-major order), and the
//! per-patch sequences of all included stages are concatenated in ascending
//! stage order into `[n, N, S, D]` with `S = Σ P'ᵢ²`.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeatureHierarchy, NUM_STAGES};
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub patch_count: usize,
    pub embed_dim: usize,
    pub scale_subset: Vec<usize>,
}

/// `√n` when `n` is a perfect square.
pub fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Per-patch token length of stage `i`: `HW / (16·4ⁱ·N)`, or `None` when
/// the patch grid does not divide the stage evenly.
pub fn scale_token_length(image_size: usize, stage: usize, patch_count: usize) -> Option<usize> {
    let grid = exact_sqrt(patch_count)?;
    let p = image_size / (4 << stage);
    (p * (4 << stage) == image_size && p % grid == 0).then(|| {
        let side = p / grid;
        side * side
    })
}

impl TokenizerConfig {
    pub fn grid(&self) -> usize {
        exact_sqrt(self.patch_count).unwrap_or(0)
    }

    /// Included stages sorted ascending, duplicates removed.
    pub fn scales(&self) -> Vec<usize> {
        let mut s = self.scale_subset.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let grid = exact_sqrt(self.patch_count)
            .filter(|&g| g > 0)
            .ok_or_else(|| Error::Config(format!("patch count {} is not a perfect square", self.patch_count)))?;
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        let scales = self.scales();
        if scales.is_empty() {
            return Err(Error::Config("scale subset is empty".into()));
        }
        for &s in &scales {
            if s >= NUM_STAGES {
                return Err(Error::Config(format!("scale {s} out of range 0..4")));
            }
            let p = backbone.stage_size(s);
            if p == 0 || p % grid != 0 || p * (4 << s) != backbone.image_size {
                return Err(Error::Config(format!(
                    "stage {s} size {p} is not divisible into a {grid}x{grid} patch grid (N={})",
                    self.patch_count
                )));
            }
        }
        Ok(())
    }

    pub fn lengths(&self, image_size: usize) -> Vec<usize> {
        self.scales()
            .iter()
            .map(|&s| scale_token_length(image_size, s, self.patch_count).unwrap_or(0))
            .collect()
    }

    /// Total per-patch token length `S`.
    pub fn total_length(&self, image_size: usize) -> usize {
        self.lengths(image_size).iter().sum()
    }
}

/// `[n, N, S, D]` tokens with the bookkeeping needed to slice scales back out.
#[derive(Clone, Debug)]
pub struct MultiScaleTokens<T: Scalar> {
    pub tokens: Tensor<T>,
    pub scales: Vec<usize>,
    pub per_scale_lengths: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl<T: Scalar> MultiScaleTokens<T> {
    pub fn total_length(&self) -> usize {
        self.per_scale_lengths.iter().sum()
    }

    pub fn batch(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn patches(&self) -> usize {
        self.tokens.dim(1)
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.dim(3)
    }

    /// Offset of the last included stage's tokens along the length axis.
    pub fn last_scale_offset(&self) -> usize {
        *self.offsets.last().expect("at least one scale")
    }

    /// Tokens of stage `stage`, `[n, N, P'ᵢ², D]`.
    pub fn scale_slice(&self, stage: usize) -> Result<Tensor<T>> {
        let k = self
            .scales
            .iter()
            .position(|&s| s == stage)
            .ok_or_else(|| Error::Config(format!("stage {stage} not in token set")))?;
        self.tokens.narrow(2, self.offsets[k], self.per_scale_lengths[k])
    }
}

/// Pointwise affine map over channels: `[n, C, P, P] → [n, P, P, D]`.
pub fn project_scale<T: Scalar>(x: &Tensor<T>, proj: &Linear<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.dim(1) != proj.d_in() {
        return Err(Error::shape("project_scale", x.shape(), proj.weight.shape()));
    }
    x.permute(&[0, 2, 3, 1])?.linear(&proj.weight, Some(&proj.bias))
}

/// `[n, P, P, D] → [n, N, (P/√N)², D]`.
pub fn patchify_flatten<T: Scalar>(x: &Tensor<T>, patch_count: usize) -> Result<Tensor<T>> {
    let grid = exact_sqrt(patch_count).filter(|&g| g > 0);
    let (n, p, d) = (x.dim(0), x.dim(1), x.dim(3));
    let grid = match grid {
        Some(g) if x.rank() == 4 && x.dim(2) == p && p % g == 0 => g,
        _ => {
            return Err(Error::invalid(
                "patchify",
                format!("P={p} is not divisible by sqrt(N) for N={patch_count}"),
            ))
        }
    };
    let side = p / grid;
    x.reshape([n, grid, side, grid, side, d])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape([n, patch_count, side * side, d])
}

/// Inverse of [`patchify_flatten`].
pub fn unpatchify<T: Scalar>(x: &Tensor<T>, spatial: usize) -> Result<Tensor<T>> {
    let (n, patches, len, d) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let grid = exact_sqrt(patches).ok_or_else(|| Error::invalid("unpatchify", "N not square"))?;
    let side = exact_sqrt(len).ok_or_else(|| Error::invalid("unpatchify", "length not square"))?;
    if grid * side != spatial {
        return Err(Error::invalid("unpatchify", format!("{grid}x{side} != {spatial}")));
    }
    x.reshape([n, grid, grid, side, side, d])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape([n, spatial, spatial, d])
}

/// One independent projection per included stage.
pub struct Tokenizer<T: Scalar> {
    pub cfg: TokenizerConfig,
    pub image_size: usize,
    pub projections: Vec<Linear<T>>,
}

impl<T: Scalar> Tokenizer<T> {
    pub fn new(cfg: &TokenizerConfig, backbone: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate(backbone)?;
        let projections = cfg
            .scales()
            .iter()
            .map(|&s| Linear::new(rng, backbone.stage_channels[s], cfg.embed_dim))
            .collect();
        Ok(Tokenizer {
            cfg: cfg.clone(),
            image_size: backbone.image_size,
            projections,
        })
    }

    /// Per-stage tokens `x''ᵢ` for every included stage, ascending.
    pub fn scale_tokens(&self, hier: &FeatureHierarchy<T>) -> Result<Vec<Tensor<T>>> {
        self.cfg
            .scales()
            .iter()
            .zip(&self.projections)
            .map(|(&s, proj)| patchify_flatten(&project_scale(&hier.stages[s], proj)?, self.cfg.patch_count))
            .collect()
    }

    pub fn assemble(&self, hier: &FeatureHierarchy<T>) -> Result<MultiScaleTokens<T>> {
        let parts = self.scale_tokens(hier)?;
        let lengths: Vec<usize> = parts.iter().map(|p| p.dim(2)).collect();
        let offsets = lengths
            .iter()
            .scan(0, |acc, &l| {
                let o = *acc;
                *acc += l;
                Some(o)
            })
            .collect();
        let tokens = Tensor::concat(&parts, 2)?;
        Ok(MultiScaleTokens {
            tokens,
            scales: self.cfg.scales(),
            per_scale_lengths: lengths,
            offsets,
        })
    }
}

impl<T: Scalar> Module<T> for Tokenizer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (s, p) in self.cfg.scales().iter().zip(&self.projections) {
            p.visit(&join(prefix, &format!("proj{s}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (s, p) in self.cfg.scales().iter().zip(self.projections.iter_mut()) {
            p.visit_mut(&join(prefix, &format!("proj{s}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::synthetic::{synthetic_hierarchy, SignalSpec};
    use proptest::prelude::{any, prop_assert_eq, proptest};

    fn bb(h: usize) -> BackboneConfig {
        BackboneConfig {
            image_size: h,
            ..BackboneConfig::default()
        }
    }

    fn tcfg(n: usize, d: usize, subset: &[usize]) -> TokenizerConfig {
        TokenizerConfig {
            patch_count: n,
            embed_dim: d,
            scale_subset: subset.to_vec(),
        }
    }

    fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), rng.normal_vec(shape.iter().product(), 1.0)).unwrap()
    }

    #[test]
    fn token_lengths_224_and_64() {
        let all = tcfg(49, 8, &[0, 1, 2, 3]);
        assert_eq!(all.lengths(224), vec![64, 16, 4, 1]);
        assert_eq!(all.total_length(224), 85);
        let desk = tcfg(4, 8, &[0, 1, 2, 3]);
        assert_eq!(desk.lengths(64), vec![64, 16, 4, 1]);
        assert_eq!(desk.total_length(64), 85);
        let sub = tcfg(49, 8, &[3, 1]);
        assert_eq!(sub.lengths(224), vec![16, 1]);
        assert_eq!(sub.total_length(224), 17);
    }

    #[test]
    fn assembled_lengths_match_formula_h224() {
        let b = bb(224);
        let t = Tokenizer::<f64>::new(&tcfg(49, 4, &[0, 1, 2, 3]), &b, &mut Rng::new(1)).unwrap();
        let hier = synthetic_hierarchy(1, &[0], &b, &SignalSpec::uniform(1, &[], 0.0)).unwrap();
        let toks = t.assemble(&hier).unwrap();
        assert_eq!(toks.per_scale_lengths, vec![64, 16, 4, 1]);
        assert_eq!(toks.offsets, vec![0, 64, 80, 84]);
        assert_eq!(toks.tokens.shape(), &[1, 49, 85, 4]);
    }

    #[test]
    fn projection_identity_and_constant() {
        let mut rng = Rng::new(3);
        let x = randn(&mut rng, &[2, 4, 3, 3]);
        let eye = Linear {
            weight: Tensor::from_vec(vec![4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap(),
            bias: Tensor::zeros([4]),
        };
        let y = project_scale(&x, &eye).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 4]);
        let expect = x.permute(&[0, 2, 3, 1]).unwrap();
        assert_eq!(y.data(), expect.data());

        let c = Tensor::<f64>::full([1, 3, 2, 2], 2.0);
        let w = Linear {
            weight: Tensor::from_f64([3, 2], &[1.0, 0.5, 2.0, 0.5, -1.0, 0.5]).unwrap(),
            bias: Tensor::zeros([2]),
        };
        let y = project_scale(&c, &w).unwrap();
        for pos in y.data().chunks(2) {
            assert_eq!(pos, &[2.0 * 2.0, 2.0 * 1.5]);
        }
        assert!(project_scale(&randn(&mut rng, &[1, 3, 2, 2]), &eye).is_err());
    }

    #[test]
    fn projection_matches_per_position_loop() {
        let mut rng = Rng::new(4);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let lin = Linear::<f64>::new(&mut rng, 3, 5);
        let lin = Linear {
            weight: randn(&mut rng, &[3, 5]),
            bias: lin.bias,
        };
        let y = project_scale(&x, &lin).unwrap();
        for n in 0..2 {
            for r in 0..4 {
                for c in 0..4 {
                    for d in 0..5 {
                        let mut s = 0.0;
                        for ch in 0..3 {
                            s += x.at(&[n, ch, r, c]) * lin.weight.at(&[ch, d]);
                        }
                        assert_eq!(y.at(&[n, r, c, d]), s);
                    }
                }
            }
        }
    }

    #[test]
    fn patchify_single_position_is_reshape() {
        let mut rng = Rng::new(5);
        let x = randn(&mut rng, &[2, 2, 2, 3]);
        let y = patchify_flatten(&x, 4).unwrap();
        assert_eq!(y.shape(), &[2, 4, 1, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn patchify_index_arithmetic() {
        // Value encodes (row, col) so membership is readable.
        let p = 4;
        let data: Vec<f64> = (0..p * p).map(|i| ((i / p) * 10 + i % p) as f64).collect();
        let x = Tensor::from_vec(vec![1, p, p, 1], data).unwrap();
        let y = patchify_flatten(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 1]);
        let patch = |j: usize| y.data()[j * 4..(j + 1) * 4].to_vec();
        assert_eq!(patch(0), vec![0.0, 1.0, 10.0, 11.0]);
        assert_eq!(patch(1), vec![2.0, 3.0, 12.0, 13.0]);
        assert_eq!(patch(2), vec![20.0, 21.0, 30.0, 31.0]);
        assert_eq!(patch(3), vec![22.0, 23.0, 32.0, 33.0]);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let x = Tensor::<f64>::zeros([1, 6, 6, 2]);
        let err = patchify_flatten(&x, 16).unwrap_err().to_string();
        assert!(err.contains("P=6") && err.contains("N=16"), "{err}");
        assert!(patchify_flatten(&x, 5).is_err());
    }

    proptest! {
        #[test]
        fn patchify_roundtrip(grid in 1usize..4, side in 1usize..4, d in 1usize..3, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let p = grid * side;
            let x = randn(&mut rng, &[2, p, p, d]);
            let y = patchify_flatten(&x, grid * grid).unwrap();
            let back = unpatchify(&y, p).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }

        #[test]
        fn total_length_formula(grid in 1usize..5, mult in 1usize..4, mask in 1u8..16) {
            let h = 32 * grid * mult;
            let subset: Vec<usize> = (0..4).filter(|i| mask & (1 << i) != 0).collect();
            let cfg = tcfg(grid * grid, 4, &subset);
            cfg.validate(&bb(h)).unwrap();
            let expect: usize = subset.iter().map(|&i| h * h / (16 * 4usize.pow(i as u32) * grid * grid)).sum();
            prop_assert_eq!(cfg.total_length(h), expect);
        }
    }

    #[test]
    fn scale_slices_recover_per_scale_tokens() {
        let b = bb(64);
        let cfg = tcfg(4, 6, &[0, 1, 2, 3]);
        let t = Tokenizer::<f64>::new(&cfg, &b, &mut Rng::new(2)).unwrap();
        let hier = synthetic_hierarchy(3, &[0, 0], &b, &SignalSpec::uniform(1, &[], 0.0)).unwrap();
        let toks = t.assemble(&hier).unwrap();
        let parts = t.scale_tokens(&hier).unwrap();
        for (k, &s) in toks.scales.iter().enumerate() {
            assert_eq!(toks.scale_slice(s).unwrap().data(), parts[k].data());
        }
    }

    #[test]
    fn patch_locality() {
        let b = bb(64);
        let cfg = tcfg(4, 5, &[0, 1, 2, 3]);
        let t = Tokenizer::<f64>::new(&cfg, &b, &mut Rng::new(2)).unwrap();
        let hier = synthetic_hierarchy(3, &[0], &b, &SignalSpec::uniform(1, &[], 0.0)).unwrap();
        let base = t.assemble(&hier).unwrap().tokens;
        // Perturb only the image region of patch 3 (bottom-right quadrant).
        let stages = hier
            .stages
            .iter()
            .map(|s| {
                let (c, p) = (s.dim(1), s.dim(2));
                let mut d = s.data().to_vec();
                for ch in 0..c {
                    for r in p / 2..p {
                        for col in p / 2..p {
                            d[(ch * p + r) * p + col] += 1.0;
                        }
                    }
                }
                s.with_data(d).unwrap()
            })
            .collect();
        let changed = t.assemble(&FeatureHierarchy { stages }).unwrap().tokens;
        let per_patch = 85 * 5;
        for j in 0..4 {
            let a = &base.data()[j * per_patch..(j + 1) * per_patch];
            let b = &changed.data()[j * per_patch..(j + 1) * per_patch];
            if j == 3 {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn adding_a_scale_preserves_existing_tokens() {
        let b = bb(64);
        let hier = synthetic_hierarchy(3, &[0], &b, &SignalSpec::uniform(1, &[], 0.0)).unwrap();
        // Same projection parameters for stages 1 and 3 in both tokenizers.
        let small = Tokenizer::<f64>::new(&tcfg(4, 4, &[1, 3]), &b, &mut Rng::new(8)).unwrap();
        let mut big = Tokenizer::<f64>::new(&tcfg(4, 4, &[0, 1, 3]), &b, &mut Rng::new(9)).unwrap();
        big.projections[1] = Linear {
            weight: small.projections[0].weight.clone(),
            bias: small.projections[0].bias.clone(),
        };
        big.projections[2] = Linear {
            weight: small.projections[1].weight.clone(),
            bias: small.projections[1].bias.clone(),
        };
        let a = small.assemble(&hier).unwrap();
        let c = big.assemble(&hier).unwrap();
        for s in [1, 3] {
            assert_eq!(a.scale_slice(s).unwrap().data(), c.scale_slice(s).unwrap().data());
        }
    }

    #[test]
    fn config_validation() {
        assert!(tcfg(4, 8, &[0, 1, 2, 3]).validate(&bb(64)).is_ok());
        assert!(tcfg(5, 8, &[0]).validate(&bb(64)).is_err());
        assert!(tcfg(4, 8, &[]).validate(&bb(64)).is_err());
        assert!(tcfg(16, 8, &[3]).validate(&bb(64)).is_err());
        assert!(tcfg(16, 8, &[0, 1]).validate(&bb(64)).is_ok());
    }
}
