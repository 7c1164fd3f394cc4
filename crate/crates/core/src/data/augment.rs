//! Count-preserving augmentation: random scaling, flips and cutout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::resize::resize_image;
use super::BoxRegion;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Uniform scale factor range; `None` disables scaling.
    pub scale_range: Option<(f64, f64)>,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Number of zeroed square patches; 0 disables cutout.
    pub cutout_count: usize,
    /// Cutout side as a fraction of the shorter image side.
    pub cutout_frac: f64,
    /// Scaled sizes are rounded to this multiple.
    pub multiple: usize,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            scale_range: Some((0.75, 1.25)),
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            cutout_count: 1,
            cutout_frac: 0.125,
            multiple: 16,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No transformation at all.
    pub fn identity() -> Self {
        AugmentationConfig {
            scale_range: None,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            cutout_count: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.hflip_prob) || !p_ok(self.vflip_prob) {
            return Err(Error::Config("flip probabilities must lie in [0, 1]".into()));
        }
        if let Some((lo, hi)) = self.scale_range {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("invalid scale range ({lo}, {hi})")));
            }
        }
        if self.multiple == 0 || !(0.0..=1.0).contains(&self.cutout_frac) {
            return Err(Error::Config("multiple must be positive and cutout_frac in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mirrors the last axis of a `(C, H, W)` tensor.
pub fn hflip(t: &Tensor) -> Tensor {
    let w = t.dim(2);
    Tensor::from_fn(t.shape(), |i| t.at(&[i[0], i[1], w - 1 - i[2]]))
}

/// Mirrors the row axis of a `(C, H, W)` tensor.
pub fn vflip(t: &Tensor) -> Tensor {
    let h = t.dim(1);
    Tensor::from_fn(t.shape(), |i| t.at(&[i[0], h - 1 - i[1], i[2]]))
}

pub struct Augmented {
    pub image: Tensor,
    pub count: f64,
    pub boxes: Vec<BoxRegion>,
}

/// Applies the configured chain; the count passes through untouched.
/// Deterministic in `(cfg.seed, sample_seed)`.
pub fn augment_with_boxes(
    image: &Tensor,
    count: f64,
    boxes: &[BoxRegion],
    cfg: &AugmentationConfig,
    sample_seed: u64,
) -> Result<Augmented> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(sample_seed);
    let mut img = image.clone();
    let mut boxes = boxes.to_vec();

    if let Some((lo, hi)) = cfg.scale_range {
        let s = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let (h, w) = (img.dim(1), img.dim(2));
        let m = cfg.multiple as f64;
        let nh = ((h as f64 * s / m).round() as usize).max(1) * cfg.multiple;
        let nw = ((w as f64 * s / m).round() as usize).max(1) * cfg.multiple;
        let (sy, sx) = (nh as f64 / h as f64, nw as f64 / w as f64);
        img = resize_image(&img, nh, nw)?;
        for b in &mut boxes {
            *b = BoxRegion {
                x0: b.x0 * sx,
                x1: b.x1 * sx,
                y0: b.y0 * sy,
                y1: b.y1 * sy,
            };
        }
    }
    let (h, w) = (img.dim(1) as f64, img.dim(2) as f64);
    if rng.random_bool(cfg.hflip_prob) {
        img = hflip(&img);
        for b in &mut boxes {
            *b = BoxRegion { x0: w - b.x1, x1: w - b.x0, ..*b };
        }
    }
    if rng.random_bool(cfg.vflip_prob) {
        img = vflip(&img);
        for b in &mut boxes {
            *b = BoxRegion { y0: h - b.y1, y1: h - b.y0, ..*b };
        }
    }
    let (ih, iw) = (img.dim(1), img.dim(2));
    let side = ((ih.min(iw) as f64 * cfg.cutout_frac).round() as usize).min(ih.min(iw));
    if side > 0 {
        for _ in 0..cfg.cutout_count {
            let y0 = rng.random_range(0..=ih - side);
            let x0 = rng.random_range(0..=iw - side);
            for c in 0..img.dim(0) {
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        img.set(&[c, y, x], 0.0);
                    }
                }
            }
        }
    }
    Ok(Augmented { image: img, count, boxes })
}

/// `(image, count)` form of [`augment_with_boxes`].
pub fn augment(image: &Tensor, count: f64, cfg: &AugmentationConfig, sample_seed: u64) -> Result<(Tensor, f64)> {
    let a = augment_with_boxes(image, count, &[], cfg, sample_seed)?;
    Ok((a.image, a.count))
}
