//! Mini-batch training and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{graph_exemplar_loss, graph_loss, LossKind};
use super::metrics::EvalReport;
use super::optim::{AdamW, OptimizerState};
use crate::data::augment::augment;
use crate::data::resize::resize_image;
use crate::data::{AugmentationConfig, Sample, Split};
use crate::error::{Error, Result};
use crate::graph::BatchStats;
use crate::model::Model;
use crate::params::{apply_batch_stats, Mode, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    /// Evaluate on the validation samples every this many steps (0: only at the end).
    pub eval_interval: usize,
    /// Stop after this many evaluations without a better validation MAE.
    pub patience: Option<usize>,
    pub seed: u64,
    pub loss: LossKind,
    /// Adds the auxiliary count from labelled exemplar crops to the objective.
    pub exemplar_variant: bool,
    pub augmentation: Option<AugmentationConfig>,
    pub lr_schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to `final_fraction` of it at `max_steps`.
    Cosine { final_fraction: f64 },
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            learning_rate: 1e-5,
            weight_decay: 1e-4,
            max_steps: 1000,
            eval_interval: 100,
            patience: None,
            seed: 0,
            loss: LossKind::L2,
            exemplar_variant: false,
            augmentation: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate and weight_decay must be non-negative".into()));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        if let LrSchedule::Cosine { final_fraction } = self.lr_schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                return Err(Error::Config("lr_schedule final_fraction must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Learning rate for 1-based `step`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine { final_fraction } => {
                let progress = (step.saturating_sub(1)) as f64 / (self.max_steps.max(2) - 1) as f64;
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
                self.learning_rate * (final_fraction + (1.0 - final_fraction) * cos)
            }
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Batch loss at every step.
    pub loss_curve: Vec<f64>,
    pub history: Vec<EvalReport>,
    /// Step of the best validation MAE, if any evaluation ran.
    pub best_step: Option<usize>,
    /// Parameters at `best_step`, or the final ones without validation data.
    pub best_params: ParamStore,
    pub optimizer: OptimizerState,
}

/// Samples grouped by image size, keeping first-appearance order.
fn group_by_size(items: Vec<(usize, Tensor, Option<Tensor>)>) -> Vec<Vec<(usize, Tensor, Option<Tensor>)>> {
    let mut groups: Vec<Vec<(usize, Tensor, Option<Tensor>)>> = Vec::new();
    for item in items {
        match groups.iter_mut().find(|g| g[0].1.shape() == item.1.shape()) {
            Some(g) => g.push(item),
            None => groups.push(vec![item]),
        }
    }
    groups
}

struct StepResult {
    loss: f64,
    grads: BTreeMap<String, Tensor>,
    stats: Vec<(String, BatchStats)>,
}

fn batch_step(model: &Model, samples: &[Sample], batch: &[usize], step: usize, cfg: &TrainConfig) -> Result<StepResult> {
    let exemplar_size = model.config().exemplar_input_size;
    let items = batch
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let s = &samples[i];
            let image = match &cfg.augmentation {
                Some(a) => augment(&s.image, s.count, a, ((step as u64) << 20) | j as u64)?.0,
                None => s.image.clone(),
            };
            let crop = if cfg.exemplar_variant {
                let c = s.crop.as_ref().ok_or(Error::MissingAuxiliary)?;
                Some(resize_image(c, exemplar_size, exemplar_size)?)
            } else {
                None
            };
            Ok((i, image, crop))
        })
        .collect::<Result<Vec<_>>>()?;

    let total = batch.len() as f64;
    let mut out = StepResult {
        loss: 0.0,
        grads: BTreeMap::new(),
        stats: Vec::new(),
    };
    for group in group_by_size(items) {
        let weight = group.len() as f64 / total;
        let targets: Vec<f64> = group.iter().map(|(i, _, _)| samples[*i].count).collect();
        let images = Tensor::stack(&group.iter().map(|(_, im, _)| im.clone()).collect::<Vec<_>>())?;
        let crops = if cfg.exemplar_variant {
            Some(Tensor::stack(
                &group.iter().map(|(_, _, c)| c.clone().expect("checked")).collect::<Vec<_>>(),
            )?)
        } else {
            None
        };

        let mut sess = Session::new(&model.params, Mode::Train);
        let x = sess.graph.constant(images);
        let c = crops.map(|c| sess.graph.constant(c));
        let fwd = model.forward(&mut sess, x, c)?;
        let loss = if cfg.exemplar_variant {
            graph_exemplar_loss(&mut sess.graph, fwd.count, fwd.aux_count, &targets, cfg.loss)?
        } else {
            graph_loss(&mut sess.graph, fwd.count, &targets, cfg.loss)?
        };
        out.loss += weight * sess.graph.value(loss).item();
        let mut grads = sess.graph.backward(loss)?;
        for (name, &v) in sess.bound_params() {
            if let Some(g) = grads.take(v) {
                let g = g.scale(weight);
                match out.grads.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.grads.insert(name.clone(), g);
                    }
                }
            }
        }
        out.stats.extend(sess.batch_stats().iter().cloned());
    }
    Ok(out)
}

/// Trains `model` in place. Deterministic in `cfg.seed` and the model's
/// initial parameters.
pub fn train(model: &mut Model, train: &[Sample], val: Option<&[Sample]>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit(Split::Train.to_string()));
    }
    if cfg.exemplar_variant && !model.config().exemplar_guided {
        return Err(Error::Config("exemplar_variant training needs an exemplar-guided model".into()));
    }
    let val = val.filter(|v| !v.is_empty());
    let opt = cfg.optimizer();
    let momentum = model.config().bn_momentum;
    let mut state = OptimizerState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch_size = cfg.batch_size.min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    let mut loss_curve = Vec::with_capacity(cfg.max_steps);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stale = 0usize;

    for step in 1..=cfg.max_steps {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + batch_size];
        cursor += batch_size;

        let r = batch_step(model, train, batch, step, cfg)?;
        if !r.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: r.loss,
                batch: batch.iter().map(|&i| train[i].id.clone()).collect(),
            });
        }
        loss_curve.push(r.loss);
        let opt = AdamW {
            lr: cfg.learning_rate_at(step),
            ..opt
        };
        opt.step(&mut state, &mut model.params, &r.grads);
        apply_batch_stats(&mut model.params, &r.stats, momentum);

        let due = step == cfg.max_steps || (cfg.eval_interval > 0 && step % cfg.eval_interval == 0);
        if let (Some(v), true) = (val, due) {
            let report = evaluate(model, v, Split::Val, step)?;
            log::info!("step {step}: loss {:.4}, val MAE {:.4}, MSE {:.4}", r.loss, report.mae, report.mse);
            if best.as_ref().is_none_or(|(_, mae, _)| report.mae < *mae) {
                best = Some((step, report.mae, model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
            history.push(report);
            if cfg.patience.is_some_and(|p| stale >= p) {
                log::info!("early stop at step {step}");
                break;
            }
        }
    }
    let (best_step, best_params) = match best {
        Some((s, _, p)) => (Some(s), p),
        None => (None, model.params.clone()),
    };
    Ok(TrainOutcome {
        loss_curve,
        history,
        best_step,
        best_params,
        optimizer: state,
    })
}

/// Evaluation-mode predictions for every sample, in input order.
pub fn predict_samples(model: &Model, samples: &[Sample]) -> Result<Vec<f64>> {
    const MAX_BATCH: usize = 16;
    let items = samples.iter().enumerate().map(|(i, s)| (i, s.image.clone(), None)).collect();
    let mut preds = vec![0.0; samples.len()];
    for group in group_by_size(items) {
        for chunk in group.chunks(MAX_BATCH) {
            let images = Tensor::stack(&chunk.iter().map(|(_, im, _)| im.clone()).collect::<Vec<_>>())?;
            let p = model.predict(&images)?;
            for ((i, _, _), v) in chunk.iter().zip(p.counts) {
                preds[*i] = v;
            }
        }
    }
    Ok(preds)
}

pub fn evaluate(model: &Model, samples: &[Sample], split: Split, step: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let preds = predict_samples(model, samples)?;
    let targets: Vec<f64> = samples.iter().map(|s| s.count).collect();
    EvalReport::new(split, step, samples.iter().map(|s| s.id.clone()).collect(), &preds, &targets)
}
