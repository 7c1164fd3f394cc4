//! The assembled counting network and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, ConvBackbone, FeatureExtractor, PseudoSiamese};
use crate::config::{AblationFlags, ModelConfig};
use crate::counter;
use crate::dass;
use crate::error::{Error, Result};
use crate::exemplar_sim;
use crate::graph::Var;
use crate::params::{Mode, ParamStore, Session};
use crate::tensor::Tensor;

/// Rows of the component ablation: which of recalibration (M), the
/// dual-attention condenser (D) and the location-aware counter (C) are on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationRow {
    B0,
    B1,
    B2,
    B3,
    B4,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [Self::B0, Self::B1, Self::B2, Self::B3, Self::B4];

    pub fn flags(self) -> AblationFlags {
        let (m, d, c) = match self {
            Self::B0 => (false, false, false),
            Self::B1 => (true, true, false),
            Self::B2 => (false, false, true),
            Self::B3 => (true, false, true),
            Self::B4 => (true, true, true),
        };
        AblationFlags {
            recalibration: m,
            condenser: d,
            location_counter: c,
        }
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for AblationRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "B0" => Ok(Self::B0),
            "B1" => Ok(Self::B1),
            "B2" => Ok(Self::B2),
            "B3" => Ok(Self::B3),
            "B4" => Ok(Self::B4),
            _ => Err(Error::UnknownRow(s.to_string())),
        }
    }
}

/// `config` with its flags replaced by those of `row`.
pub fn ablation_variant(config: &ModelConfig, row: &str) -> Result<ModelConfig> {
    let row: AblationRow = row.parse()?;
    Ok(ModelConfig {
        flags: row.flags(),
        ..config.clone()
    })
}

/// Every intermediate of one forward pass, for tests and visualization.
#[derive(Clone, Debug, Default)]
pub struct Intermediates {
    /// `F_r`
    pub features: Option<Var>,
    /// `F_e`
    pub exemplar_grid: Option<Var>,
    /// `T_e`, `(B, T, C)`
    pub token: Option<Var>,
    /// `(α, β, γ)`, `(B, 3)`
    pub direction_weights: Option<Var>,
    /// `F̄_r`
    pub integrated: Option<Var>,
    /// `(e_1..e_T)`, `(B, T)`
    pub token_weights: Option<Var>,
    /// `T̄_e`
    pub recalibrated: Option<Var>,
    /// `S`, `(B, h, w)`
    pub similarity: Option<Var>,
}

pub struct ForwardOutput {
    /// `(B,)`, unclamped.
    pub count: Var,
    /// Auxiliary count from labelled exemplar crops, when supplied.
    pub aux_count: Option<Var>,
    pub intermediates: Intermediates,
}

/// Evaluation-mode outputs as plain tensors.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub counts: Vec<f64>,
    pub similarity: Option<Tensor>,
}

pub const CROP_STEM_PREFIX: &str = "backbone.exemplar_crop";

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    backbone: PseudoSiamese,
    crop_stem: Option<ConvBackbone>,
}

struct Backend {
    direction_weights: Option<Var>,
    integrated: Var,
    token_weights: Var,
    recalibrated: Var,
    similarity: Var,
    count: Var,
}

impl Model {
    /// Validates `config` and initializes parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = PseudoSiamese::new(&config);
        let crop_stem = config
            .exemplar_guided
            .then(|| ConvBackbone::new(CROP_STEM_PREFIX, &config));
        let mut params = ParamStore::new();
        let flags = config.flags;

        backbone.register_main(&mut params, &mut rng);
        if flags.builds_similarity() {
            backbone.register_exemplar(&mut params, &mut rng);
            if let Some(stem) = &crop_stem {
                stem.register(&mut params, &mut rng);
            }
            exemplar_sim::register_tokenizer(&mut params, config.channels, config.sub_patch, &mut rng);
            dass::register(&mut params, &config, &mut rng);
        }
        if flags.location_counter || !flags.builds_similarity() {
            counter::register_head(&mut params, config.channels, &config.head_widths, &mut rng);
        } else {
            counter::register_similarity_scale(&mut params);
        }
        Ok(Model {
            config,
            params,
            backbone,
            crop_stem,
        })
    }

    /// Rebuilds a model around stored parameters after checking that every
    /// name and shape matches what `config` registers.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(config)?;
        for (name, entry) in model.params.iter() {
            let found = params.entry(name).ok_or_else(|| Error::ParamShapeMismatch {
                name: name.to_string(),
                found: vec![],
                expected: entry.tensor.shape().to_vec(),
            })?;
            if found.tensor.shape() != entry.tensor.shape() {
                return Err(Error::ParamShapeMismatch {
                    name: name.to_string(),
                    found: found.tensor.shape().to_vec(),
                    expected: entry.tensor.shape().to_vec(),
                });
            }
        }
        if let Some((extra, e)) = params.iter().find(|(n, _)| !model.params.contains(n)) {
            return Err(Error::ParamShapeMismatch {
                name: extra.to_string(),
                found: e.tensor.shape().to_vec(),
                expected: vec![],
            });
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Full pipeline on `(B, 3, H, W)` images. `exemplar_crops`, when given to
    /// an exemplar-guided model, produces the auxiliary count.
    pub fn forward(&self, sess: &mut Session<'_>, images: Var, exemplar_crops: Option<Var>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let flags = cfg.flags;
        let features = backbone::extract_main_features(sess, &self.backbone.main, images)?;
        let mut inter = Intermediates {
            features: Some(features),
            ..Default::default()
        };

        if !flags.builds_similarity() {
            let g = &mut sess.graph;
            let s = g.shape(features).to_vec();
            let flat = g.reshape(features, &[s[0], s[1], s[2] * s[3]])?;
            let pooled = g.mean_axis(flat, 2)?;
            let count = counter::regress_count(sess, pooled, cfg.head_widths.len())?;
            return Ok(ForwardOutput {
                count,
                aux_count: None,
                intermediates: inter,
            });
        }

        let grid =
            backbone::extract_exemplar_features(sess, &self.backbone.exemplar, images, cfg.exemplar_input_size)?;
        let token = exemplar_sim::simulate(sess, grid, cfg.unfold_kernel, cfg.unfold_stride, cfg.sub_patch)?;
        let back = self.backend(sess, features, token)?;
        inter.exemplar_grid = Some(grid);
        inter.token = Some(token);
        inter.direction_weights = back.direction_weights;
        inter.integrated = Some(back.integrated);
        inter.token_weights = Some(back.token_weights);
        inter.recalibrated = Some(back.recalibrated);
        inter.similarity = Some(back.similarity);

        let aux_count = match (&self.crop_stem, exemplar_crops) {
            (Some(stem), Some(crops)) => {
                let aux_grid = backbone::extract_exemplar_features(sess, stem, crops, cfg.exemplar_input_size)?;
                let aux_token =
                    exemplar_sim::simulate(sess, aux_grid, cfg.unfold_kernel, cfg.unfold_stride, cfg.sub_patch)?;
                Some(self.backend(sess, features, aux_token)?.count)
            }
            _ => None,
        };
        Ok(ForwardOutput {
            count: back.count,
            aux_count,
            intermediates: inter,
        })
    }

    fn backend(&self, sess: &mut Session<'_>, features: Var, token: Var) -> Result<Backend> {
        let cfg = &self.config;
        let flags = cfg.flags;
        let batch = sess.graph.shape(features)[0];

        let (aniso, direction_weights) = if flags.recalibration {
            let aniso = dass::anisotropic_encode(sess, features)?;
            let dw = if flags.condenser {
                dass::direction_weights(sess, token)?
            } else {
                dass::uniform_direction_weights(&mut sess.graph, batch)
            };
            (Some(aniso), Some(dw))
        } else {
            (None, None)
        };
        let integrated = dass::integrate_features(sess, features, aniso.as_ref(), direction_weights)?;

        let token_weights = if flags.condenser {
            let gram = dass::gram_matrix(&mut sess.graph, features)?;
            dass::token_weights(sess, gram)?
        } else {
            dass::uniform_token_weights(&mut sess.graph, batch, cfg.token_count())
        };
        let recalibrated = dass::recalibrate_token(&mut sess.graph, token, token_weights)?;
        let similarity = dass::similarity_map(&mut sess.graph, integrated, recalibrated)?;

        let count = if flags.location_counter {
            let x = counter::pool_correlation(&mut sess.graph, integrated, similarity)?;
            counter::regress_count(sess, x, cfg.head_widths.len())?
        } else {
            counter::similarity_count(sess, similarity)?
        };
        Ok(Backend {
            direction_weights,
            integrated,
            token_weights,
            recalibrated,
            similarity,
            count,
        })
    }

    /// Evaluation-mode forward on a `(B, 3, H, W)` batch.
    pub fn predict(&self, images: &Tensor) -> Result<Prediction> {
        let mut sess = Session::frozen(&self.params, Mode::Eval);
        let x = sess.graph.constant(images.clone());
        let out = self.forward(&mut sess, x, None)?;
        Ok(Prediction {
            counts: sess.graph.value(out.count).data().to_vec(),
            similarity: out.intermediates.similarity.map(|s| sess.graph.value(s).clone()),
        })
    }
}
