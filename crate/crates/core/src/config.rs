//! Architectural hyperparameters and ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Component switches. Each "off" state is a documented degeneration:
///
/// * `recalibration` off: the anisotropic branch contributes nothing, so the
///   integrated features are `W ∗ F_r`.
/// * `condenser` off: direction weights are fixed at 1/3 each and token
///   weights at `1 / token_count`.
/// * `location_counter` off: with a similarity map present the count is a
///   learned affine function of the map's global mean; with no similarity
///   components at all the count is regressed from globally pooled `F_r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub recalibration: bool,
    pub condenser: bool,
    pub location_counter: bool,
}

impl AblationFlags {
    pub const ALL: AblationFlags = AblationFlags {
        recalibration: true,
        condenser: true,
        location_counter: true,
    };

    pub fn builds_similarity(&self) -> bool {
        self.recalibration || self.condenser || self.location_counter
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels `C` shared by both branches, tokens and the counter.
    pub channels: usize,
    /// Output width of each stride-2 backbone stage; the last must equal `channels`.
    pub backbone_widths: Vec<usize>,
    /// Total backbone downsampling, `2^stages`.
    pub stride: usize,
    /// Side the exemplar branch resizes its input to.
    pub exemplar_input_size: usize,
    /// Side `G` of the exemplar feature grid.
    pub exemplar_grid: usize,
    /// Unfold window `K`.
    pub unfold_kernel: usize,
    pub unfold_stride: usize,
    /// Side of the square sub-patches the pseudo exemplar is split into.
    pub sub_patch: usize,
    /// Width of the horizontal `1×k` anisotropic kernel.
    pub aniso_kernel_h: usize,
    /// Height of the vertical `k×1` anisotropic kernel.
    pub aniso_kernel_v: usize,
    pub direction_hidden: usize,
    /// Regression head layer widths, ending in 1.
    pub head_widths: Vec<usize>,
    pub flags: AblationFlags,
    /// Adds a third stem for labelled exemplar crops and an auxiliary count.
    pub exemplar_guided: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 256,
            backbone_widths: vec![32, 64, 128, 256],
            stride: 16,
            exemplar_input_size: 512,
            exemplar_grid: 32,
            unfold_kernel: 8,
            unfold_stride: 1,
            sub_patch: 2,
            aniso_kernel_h: 3,
            aniso_kernel_v: 3,
            direction_hidden: 64,
            head_widths: vec![64, 32, 1],
            flags: AblationFlags::ALL,
            exemplar_guided: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// C = 8, 64-pixel exemplar input (4×4 grid, 4×4 window, 4 tokens).
    /// Small enough for finite-difference checks over every parameter.
    pub fn tiny() -> Self {
        ModelConfig {
            channels: 8,
            backbone_widths: vec![8, 8, 8, 8],
            exemplar_input_size: 64,
            exemplar_grid: 4,
            unfold_kernel: 4,
            ..Self::default()
        }
    }

    /// Desk-scale training preset: C = 8 with a 128-pixel exemplar input
    /// (8×8 grid, 25 unfolded 4×4 windows).
    pub fn desk() -> Self {
        ModelConfig {
            channels: 8,
            backbone_widths: vec![8, 16, 16, 8],
            exemplar_input_size: 128,
            exemplar_grid: 8,
            unfold_kernel: 4,
            ..Self::default()
        }
    }

    pub fn token_count(&self) -> usize {
        let side = self.unfold_kernel / self.sub_patch.max(1);
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return bad("backbone_widths must be non-empty and positive".into());
        }
        if self.backbone_widths.last() != Some(&self.channels) {
            return bad(format!(
                "last backbone width {:?} must equal channels {}",
                self.backbone_widths.last(),
                self.channels
            ));
        }
        if self.stride != 1usize << self.backbone_widths.len() {
            return bad(format!(
                "stride {} does not match {} stride-2 stages",
                self.stride,
                self.backbone_widths.len()
            ));
        }
        if self.exemplar_input_size % self.stride != 0 || self.exemplar_input_size / self.stride != self.exemplar_grid {
            return bad(format!(
                "exemplar_input_size / stride = {} / {} must equal exemplar_grid {}",
                self.exemplar_input_size, self.stride, self.exemplar_grid
            ));
        }
        if self.unfold_kernel == 0 || self.unfold_kernel > self.exemplar_grid {
            return bad(format!(
                "unfold_kernel {} must lie in 1..={}",
                self.unfold_kernel, self.exemplar_grid
            ));
        }
        if self.unfold_stride == 0 {
            return bad("unfold_stride must be at least 1".into());
        }
        if self.sub_patch == 0 || self.unfold_kernel % self.sub_patch != 0 || self.unfold_kernel % 2 != 0 {
            return bad(format!(
                "unfold_kernel {} must be even and divisible by sub_patch {}",
                self.unfold_kernel, self.sub_patch
            ));
        }
        if self.aniso_kernel_h % 2 == 0 || self.aniso_kernel_v % 2 == 0 {
            return bad("anisotropic kernel sizes must be odd for same padding".into());
        }
        if self.head_widths.last() != Some(&1) || self.head_widths.contains(&0) {
            return bad(format!("head_widths {:?} must be positive and end in 1", self.head_widths));
        }
        if self.direction_hidden == 0 {
            return bad("direction_hidden must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("bn_momentum must lie in [0, 1] and bn_eps be positive".into());
        }
        Ok(())
    }
}
