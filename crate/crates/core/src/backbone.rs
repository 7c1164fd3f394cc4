//! Pseudo-Siamese frontend: two convolutional branches with separate
//! weights. The main branch sees the image at its native (multiple of the
//! stride) size; the exemplar branch sees it resized to a fixed square.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::graph::Var;
use crate::nn;
use crate::params::{ParamStore, Session};

/// Anything that maps `(B, 3, H, W)` images to `(B, C, H/stride, W/stride)`
/// features. The default is [`ConvBackbone`]; a pretrained network can be
/// dropped in as long as it honours the same shape contract.
pub trait FeatureExtractor {
    fn register(&self, store: &mut ParamStore, rng: &mut dyn rand::RngCore);
    fn forward(&self, sess: &mut Session<'_>, images: Var) -> Result<Var>;
    fn stride(&self) -> usize;
    fn out_channels(&self) -> usize;
}

/// Stack of `conv3×3 (stride 2) → batch norm → ReLU` stages.
#[derive(Clone, Debug)]
pub struct ConvBackbone {
    pub prefix: String,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub bn_eps: f64,
}

impl ConvBackbone {
    pub fn new(prefix: impl Into<String>, config: &ModelConfig) -> Self {
        ConvBackbone {
            prefix: prefix.into(),
            in_channels: 3,
            widths: config.backbone_widths.clone(),
            bn_eps: config.bn_eps,
        }
    }

    pub fn stage_prefix(&self, i: usize) -> String {
        format!("{}.stage{i}", self.prefix)
    }
}

impl FeatureExtractor for ConvBackbone {
    fn register(&self, store: &mut ParamStore, rng: &mut dyn rand::RngCore) {
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            let p = self.stage_prefix(i);
            nn::register_conv(store, &format!("{p}.conv"), w, cin, (3, 3), false, rng);
            nn::register_batch_norm(store, &format!("{p}.bn"), w);
            cin = w;
        }
    }

    fn forward(&self, sess: &mut Session<'_>, images: Var) -> Result<Var> {
        let mut x = images;
        for i in 0..self.widths.len() {
            let p = self.stage_prefix(i);
            x = nn::conv(sess, &format!("{p}.conv"), x, (2, 2), (1, 1))?;
            x = nn::batch_norm(sess, &format!("{p}.bn"), x, self.bn_eps)?;
            x = sess.graph.relu(x);
        }
        Ok(x)
    }

    fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    fn out_channels(&self) -> usize {
        *self.widths.last().expect("at least one stage")
    }
}

fn check_image(sess: &Session<'_>, images: Var) -> Result<(usize, usize, usize)> {
    let s = sess.graph.shape(images);
    if s.len() != 4 || s[1] != 3 || s[0] == 0 || s[2] == 0 || s[3] == 0 {
        return Err(shape_err("image", format!("expected (B>=1, 3, H, W), got {s:?}")));
    }
    Ok((s[0], s[2], s[3]))
}

/// `F_r(I)`: main-branch features at `1/stride` resolution.
pub fn extract_main_features(sess: &mut Session<'_>, branch: &dyn FeatureExtractor, images: Var) -> Result<Var> {
    let (_, h, w) = check_image(sess, images)?;
    let stride = branch.stride();
    for (axis, value) in [("height", h), ("width", w)] {
        if value % stride != 0 {
            return Err(Error::Divisibility { axis, value, stride });
        }
    }
    branch.forward(sess, images)
}

/// `F_e(I)`: exemplar-branch grid computed from the image bilinearly resized
/// to `input_size × input_size`.
pub fn extract_exemplar_features(
    sess: &mut Session<'_>,
    branch: &dyn FeatureExtractor,
    images: Var,
    input_size: usize,
) -> Result<Var> {
    let (_, h, w) = check_image(sess, images)?;
    if input_size % branch.stride() != 0 {
        return Err(Error::Divisibility {
            axis: "exemplar input size",
            value: input_size,
            stride: branch.stride(),
        });
    }
    let resized = if (h, w) == (input_size, input_size) {
        images
    } else {
        sess.graph.resize_bilinear(images, input_size, input_size)?
    };
    branch.forward(sess, resized)
}

/// The two independently parameterized branches.
#[derive(Clone, Debug)]
pub struct PseudoSiamese {
    pub main: ConvBackbone,
    pub exemplar: ConvBackbone,
}

impl PseudoSiamese {
    pub const MAIN_PREFIX: &'static str = "backbone.main";
    pub const EXEMPLAR_PREFIX: &'static str = "backbone.exemplar";

    pub fn new(config: &ModelConfig) -> Self {
        PseudoSiamese {
            main: ConvBackbone::new(Self::MAIN_PREFIX, config),
            exemplar: ConvBackbone::new(Self::EXEMPLAR_PREFIX, config),
        }
    }

    pub fn register_main<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.main.register(store, rng);
    }

    pub fn register_exemplar<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.exemplar.register(store, rng);
    }
}
