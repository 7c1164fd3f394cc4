//! Input resizing: the main branch keeps aspect ratio with its longer side
//! inside a band, the exemplar branch always sees a fixed square.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::graph::resize_bilinear_tensor;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResizeMode {
    TrainMain,
    ExemplarBranch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResizePolicy {
    pub min_side: usize,
    pub max_side: usize,
    /// Both output sides are rounded to a multiple of this (the backbone stride).
    pub multiple: usize,
    pub exemplar_size: usize,
}

impl Default for ResizePolicy {
    fn default() -> Self {
        ResizePolicy {
            min_side: 384,
            max_side: 1584,
            multiple: 16,
            exemplar_size: 512,
        }
    }
}

fn round_to_multiple(v: f64, m: usize) -> usize {
    ((v / m as f64).round() as usize).max(1) * m
}

/// Output `(height, width)` for an `h × w` input.
pub fn target_size(h: usize, w: usize, mode: ResizeMode, policy: &ResizePolicy) -> (usize, usize) {
    match mode {
        ResizeMode::ExemplarBranch => (policy.exemplar_size, policy.exemplar_size),
        ResizeMode::TrainMain => {
            let long = h.max(w) as f64;
            let scale = if long > policy.max_side as f64 {
                policy.max_side as f64 / long
            } else if long < policy.min_side as f64 {
                policy.min_side as f64 / long
            } else {
                1.0
            };
            (
                round_to_multiple(h as f64 * scale, policy.multiple),
                round_to_multiple(w as f64 * scale, policy.multiple),
            )
        }
    }
}

/// Bilinear resize of a `(C, H, W)` or `(B, C, H, W)` tensor.
pub fn resize_image(image: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let r = image.ndim();
    if r < 2 || h == 0 || w == 0 || image.numel() == 0 {
        return Err(shape_err("resize", format!("cannot resize {:?} to {h}x{w}", image.shape())));
    }
    if image.dim(r - 2) == h && image.dim(r - 1) == w {
        return Ok(image.clone());
    }
    Ok(resize_bilinear_tensor(image, h, w))
}

pub fn resize_policy(image: &Tensor, mode: ResizeMode, policy: &ResizePolicy) -> Result<Tensor> {
    let r = image.ndim();
    if r < 2 || image.numel() == 0 {
        return Err(shape_err("resize_policy", format!("empty image {:?}", image.shape())));
    }
    let (h, w) = target_size(image.dim(r - 2), image.dim(r - 1), mode, policy);
    resize_image(image, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wide_image_is_clamped_to_band() {
        let p = ResizePolicy::default();
        // 2000x1000 (w x h): scale 1584/2000 = 0.792 → 792 rows → 49.5·16 rounds to 800.
        assert_eq!(target_size(1000, 2000, ResizeMode::TrainMain, &p), (800, 1584));
    }

    #[test]
    fn in_band_multiple_is_fixed_point() {
        let p = ResizePolicy::default();
        assert_eq!(target_size(400, 400, ResizeMode::TrainMain, &p), (400, 400));
        let img = Tensor::full(&[3, 512, 512], 0.3);
        let out = resize_policy(&img, ResizeMode::ExemplarBranch, &p).unwrap();
        assert_eq!(out, img);
    }

    proptest! {
        #[test]
        fn outputs_are_multiples_within_band(h in 1usize..3000, w in 1usize..3000) {
            let p = ResizePolicy::default();
            let (oh, ow) = target_size(h, w, ResizeMode::TrainMain, &p);
            prop_assert_eq!(oh % 16, 0);
            prop_assert_eq!(ow % 16, 0);
            let long = oh.max(ow);
            prop_assert!(long >= p.min_side && long <= p.max_side, "long side {}", long);
        }
    }
}
