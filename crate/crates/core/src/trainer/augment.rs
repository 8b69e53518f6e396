//! Seeded image augmentation on `[C, H, W]` buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    #[serde(default)]
    pub hflip: bool,
    #[serde(default)]
    pub vflip: bool,
    #[serde(default)]
    pub rot90: bool,
    /// Output side of a uniformly placed crop.
    #[serde(default)]
    pub random_crop: Option<usize>,
    /// Output side of a centred crop, applied after any random crop.
    #[serde(default)]
    pub center_crop: Option<usize>,
    /// Per-channel normalization, applied last.
    #[serde(default)]
    pub mean: Vec<f64>,
    #[serde(default)]
    pub std: Vec<f64>,
}

impl AugmentConfig {
    /// Output side for an input of side `size`.
    pub fn output_size(&self, size: usize) -> usize {
        self.center_crop.or(self.random_crop).unwrap_or(size)
    }
}

/// `[C, H, W]` image buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid("image", format!("{} values for {channels}x{height}x{width}", data.len())));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    fn remap(&self, height: usize, width: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Image {
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let plane = &self.data[c * self.height * self.width..(c + 1) * self.height * self.width];
            for r in 0..height {
                for col in 0..width {
                    let (sr, sc) = src(r, col);
                    data.push(plane[sr * self.width + sc]);
                }
            }
        }
        Image {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    pub fn hflip(&self) -> Image {
        let w = self.width;
        self.remap(self.height, w, |r, c| (r, w - 1 - c))
    }

    pub fn vflip(&self) -> Image {
        let h = self.height;
        self.remap(h, self.width, |r, c| (h - 1 - r, c))
    }

    /// Counter-clockwise quarter turns.
    pub fn rot90(&self, turns: usize) -> Image {
        let (h, w) = (self.height, self.width);
        match turns % 4 {
            0 => self.clone(),
            1 => self.remap(w, h, |r, c| (c, w - 1 - r)),
            2 => self.remap(h, w, |r, c| (h - 1 - r, w - 1 - c)),
            _ => self.remap(w, h, |r, c| (h - 1 - c, r)),
        }
    }

    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Image> {
        if top + size > self.height || left + size > self.width {
            return Err(Error::Config(format!(
                "crop {size} at ({top}, {left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Ok(self.remap(size, size, |r, c| (top + r, left + c)))
    }

    pub fn center_crop(&self, size: usize) -> Result<Image> {
        if size > self.height || size > self.width {
            return Err(Error::Config(format!("crop {size} larger than {}x{} image", self.height, self.width)));
        }
        self.crop((self.height - size) / 2, (self.width - size) / 2, size)
    }

    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        if mean.is_empty() && std.is_empty() {
            return Ok(());
        }
        if mean.len() != self.channels || std.len() != self.channels {
            return Err(Error::Config(format!(
                "normalization needs {} channel constants, got {}/{}",
                self.channels,
                mean.len(),
                std.len()
            )));
        }
        let plane = self.height * self.width;
        for c in 0..self.channels {
            for v in &mut self.data[c * plane..(c + 1) * plane] {
                *v = (*v - mean[c]) / std[c];
            }
        }
        Ok(())
    }
}

/// Random offsets of a `size` crop from an `h × w` image.
pub fn random_crop_offsets(rng: &mut Rng, h: usize, w: usize, size: usize) -> Result<(usize, usize)> {
    if size > h || size > w {
        return Err(Error::Config(format!("crop {size} larger than {h}x{w} image")));
    }
    Ok((rng.below(h - size + 1), rng.below(w - size + 1)))
}

/// Flips, rotation, crops, then normalization; deterministic in `seed`.
pub fn augment(image: &Image, seed: u64, cfg: &AugmentConfig) -> Result<Image> {
    let mut rng = Rng::new(seed);
    let mut img = image.clone();
    if cfg.hflip && rng.uniform() < 0.5 {
        img = img.hflip();
    }
    if cfg.vflip && rng.uniform() < 0.5 {
        img = img.vflip();
    }
    if cfg.rot90 {
        img = img.rot90(rng.below(4));
    }
    if let Some(size) = cfg.random_crop {
        let (top, left) = random_crop_offsets(&mut rng, img.height, img.width, size)?;
        img = img.crop(top, left, size)?;
    }
    if let Some(size) = cfg.center_crop {
        img = img.center_crop(size)?;
    }
    img.normalize(&cfg.mean, &cfg.std)?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    fn ramp(c: usize, h: usize, w: usize) -> Image {
        Image::new(c, h, w, (0..c * h * w).map(|i| i as f64).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn flips_are_involutions(c in 1usize..3, h in 1usize..6, w in 1usize..6) {
            let img = ramp(c, h, w);
            prop_assert_eq!(img.hflip().hflip(), img.clone());
            prop_assert_eq!(img.vflip().vflip(), img.clone());
            prop_assert_eq!(img.rot90(1).rot90(3), img.clone());
            prop_assert_eq!(img.rot90(2), img.hflip().vflip());
        }

        #[test]
        fn augment_is_a_permutation_without_crops(seed in any::<u64>()) {
            let img = ramp(2, 5, 5);
            let cfg = AugmentConfig { hflip: true, vflip: true, rot90: true, ..AugmentConfig::default() };
            let out = augment(&img, seed, &cfg).unwrap();
            let mut sorted = out.data.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assert_eq!(sorted, img.data.clone());
            prop_assert_eq!(augment(&img, seed, &cfg).unwrap(), out);
        }
    }

    #[test]
    fn rot90_quarter_turn() {
        // 1 2     2 4
        // 3 4  →  1 3
        let img = Image::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(img.rot90(1).data, vec![2.0, 4.0, 1.0, 3.0]);
        let tall = ramp(1, 3, 2);
        assert_eq!((tall.rot90(1).height, tall.rot90(1).width), (2, 3));
    }

    #[test]
    fn crops() {
        let img = ramp(1, 4, 4);
        assert_eq!(img.center_crop(4).unwrap(), img);
        assert_eq!(img.center_crop(2).unwrap().data, vec![5.0, 6.0, 9.0, 10.0]);
        assert!(img.center_crop(5).is_err());
        let cfg = AugmentConfig {
            random_crop: Some(3),
            ..AugmentConfig::default()
        };
        let out = augment(&img, 1, &cfg).unwrap();
        assert_eq!((out.height, out.width), (3, 3));
        assert!(augment(&ramp(1, 2, 2), 1, &cfg).is_err());
    }

    #[test]
    fn random_crop_offsets_golden() {
        let mut rng = Rng::new(2024);
        let offsets: Vec<(usize, usize)> = (0..6).map(|_| random_crop_offsets(&mut rng, 72, 72, 64).unwrap()).collect();
        assert_eq!(offsets, vec![(6, 1), (8, 8), (6, 6), (3, 8), (2, 6), (1, 4)]);
    }

    #[test]
    fn normalization_applied_last() {
        let img = Image::new(2, 1, 2, vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        let cfg = AugmentConfig {
            hflip: true,
            mean: vec![1.0, 10.0],
            std: vec![2.0, 5.0],
            ..AugmentConfig::default()
        };
        let out = augment(&img, 0, &cfg).unwrap();
        let mut expect = vec![0.0, 1.0, 0.0, 2.0];
        if out.data[0] != 0.0 {
            expect = vec![1.0, 0.0, 2.0, 0.0];
        }
        assert_eq!(out.data, expect);
        let bad = AugmentConfig {
            mean: vec![0.0],
            std: vec![1.0],
            ..AugmentConfig::default()
        };
        assert!(augment(&img, 0, &bad).is_err());
    }
}
