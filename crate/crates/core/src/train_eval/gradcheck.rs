//! Central finite-difference checks of analytic gradients.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::Model;
use crate::params::{Mode, ParamKind, ParamStore, Session};
use crate::tensor::Tensor;
use crate::{backbone, counter, dass, exemplar_sim, nn};

/// Which part of the network to check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradModule {
    /// The whole model, every parameter and every input pixel.
    All,
    /// A single dense layer.
    Linear,
    Backbone,
    ExemplarSim,
    Dass,
    Counter,
}

impl GradModule {
    pub const ALL: [GradModule; 6] = [
        Self::All,
        Self::Linear,
        Self::Backbone,
        Self::ExemplarSim,
        Self::Dass,
        Self::Counter,
    ];
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradModule::All => "all",
            GradModule::Linear => "linear",
            GradModule::Backbone => "backbone",
            GradModule::ExemplarSim => "exemplar_sim",
            GradModule::Dass => "dass",
            GradModule::Counter => "counter",
        })
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradModule::ALL
            .into_iter()
            .find(|m| m.to_string() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown gradcheck module `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to rounding are compared in absolute terms.
    pub floor: f64,
    pub batch: usize,
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-5,
            batch: 2,
            image_size: (64, 64),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub module: GradModule,
    pub max_rel_error: f64,
    /// Entry with the largest error, `name[flat index]`.
    pub worst: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Entries whose ±step evaluation crossed a ReLU kink and was excluded.
    pub skipped_kinks: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type Build<'a> = dyn Fn(&mut Session<'_>, &[Var]) -> Result<Var> + Sync + 'a;

fn evaluate(store: &ParamStore, inputs: &[Tensor], build: &Build<'_>) -> Result<(f64, Vec<bool>)> {
    let mut sess = Session::frozen(store, Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| sess.graph.constant(t.clone())).collect();
    let out = build(&mut sess, &vars)?;
    Ok((sess.graph.value(out).item(), sess.graph.kink_signature()))
}

enum Target {
    Param(String),
    Input(usize),
}

/// Compares the gradient of the scalar `build` output against central
/// differences for every entry of the trainable parameters accepted by
/// `select` and of every input.
pub fn check_scalar(
    module: GradModule,
    store: &ParamStore,
    inputs: &[Tensor],
    select: impl Fn(&str) -> bool,
    build: &Build<'_>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut sess = Session::new(store, Mode::Train);
    let in_vars: Vec<Var> = inputs.iter().map(|t| sess.graph.variable(t.clone())).collect();
    let out = build(&mut sess, &in_vars)?;
    let base_sig = sess.graph.kink_signature();
    let mut grads = sess.graph.backward(out)?;

    let mut entries: Vec<(Target, usize, f64)> = Vec::new();
    let names: Vec<String> = store
        .trainable_names()
        .into_iter()
        .filter(|n| select(n))
        .collect();
    for name in names {
        let n = store.tensor(&name)?.numel();
        let g = sess
            .bound_params()
            .get(&name)
            .and_then(|&v| grads.take(v))
            .unwrap_or_else(|| Tensor::zeros(store.tensor(&name).expect("listed").shape()));
        for i in 0..n {
            entries.push((Target::Param(name.clone()), i, g.data()[i]));
        }
    }
    for (k, &v) in in_vars.iter().enumerate() {
        let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for (i, &gi) in g.data().iter().enumerate() {
            entries.push((Target::Input(k), i, gi));
        }
    }
    drop(sess);

    let h = opts.step;
    let results: Vec<Result<Option<(f64, String, f64, f64)>>> = entries
        .par_iter()
        .map_init(
            || (store.clone(), inputs.to_vec()),
            |(st, ins), (target, i, analytic)| {
                let slot = |st: &mut ParamStore, ins: &mut [Tensor], delta: f64| match target {
                    Target::Param(n) => st.get_mut(n).expect("listed").data_mut()[*i] += delta,
                    Target::Input(k) => ins[*k].data_mut()[*i] += delta,
                };
                let original = match target {
                    Target::Param(n) => st.tensor(n)?.data()[*i],
                    Target::Input(k) => ins[*k].data()[*i],
                };
                slot(st, ins, h);
                let (fp, sp) = evaluate(st, ins, build)?;
                slot(st, ins, -2.0 * h);
                let (fm, sm) = evaluate(st, ins, build)?;
                match target {
                    Target::Param(n) => st.get_mut(n).expect("listed").data_mut()[*i] = original,
                    Target::Input(k) => ins[*k].data_mut()[*i] = original,
                }
                if sp != base_sig || sm != base_sig {
                    return Ok(None);
                }
                let numeric = (fp - fm) / (2.0 * h);
                let label = match target {
                    Target::Param(n) => format!("{n}[{i}]"),
                    Target::Input(k) => format!("input{k}[{i}]"),
                };
                Ok(Some((relative_error(*analytic, numeric, opts.floor), label, *analytic, numeric)))
            },
        )
        .collect();

    let mut report = GradCheckReport {
        module,
        max_rel_error: 0.0,
        worst: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for r in results {
        match r? {
            None => report.skipped_kinks += 1,
            Some((e, label, a, n)) => {
                report.checked += 1;
                if e > report.max_rel_error || report.worst.is_empty() {
                    report.max_rel_error = report.max_rel_error.max(e);
                    report.worst = label;
                    report.worst_analytic = a;
                    report.worst_numeric = n;
                }
            }
        }
    }
    Ok(report)
}

/// Fixed random weights for turning a tensor output into a scalar loss.
fn probe(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn weighted_sum(sess: &mut Session<'_>, x: Var, w: &Tensor) -> Result<Var> {
    let w = sess.graph.constant(w.clone());
    let p = sess.graph.mul(x, w)?;
    Ok(sess.graph.sum(p))
}

/// Runs the check for `module` on a model built from `config` (which should
/// be small, such as [`ModelConfig::tiny`]).
pub fn gradient_check(config: &ModelConfig, module: GradModule, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let model = Model::new(config.clone())?;
    let (h, w) = opts.image_size;
    let b = opts.batch.max(1);
    let c = config.channels;
    let (fh, fw) = (h / config.stride, w / config.stride);
    let t = config.token_count();

    match module {
        GradModule::All => {
            let images = Tensor::uniform(&[b, 3, h, w], 0.0, 1.0, &mut rng);
            let targets = Tensor::uniform(&[b], 0.0, 5.0, &mut rng);
            let build = move |s: &mut Session<'_>, v: &[Var]| -> Result<Var> {
                let out = model.forward(s, v[0], None)?;
                let tgt = s.graph.constant(targets.clone());
                let d = s.graph.sub(out.count, tgt)?;
                let sq = s.graph.mul(d, d)?;
                Ok(s.graph.mean(sq))
            };
            let store = Model::new(config.clone())?.params;
            check_scalar(module, &store, &[images], |_| true, &build, opts)
        }
        GradModule::Linear => {
            let mut store = ParamStore::new();
            nn::register_linear(&mut store, "probe.fc", 4, 6, &mut rng);
            let x = Tensor::randn(&[b, 6], 1.0, &mut rng);
            let wts = probe(&[b, 4], &mut rng);
            let build = move |s: &mut Session<'_>, v: &[Var]| -> Result<Var> {
                let y = nn::linear(s, "probe.fc", v[0])?;
                weighted_sum(s, y, &wts)
            };
            check_scalar(module, &store, &[x], |_| true, &build, opts)
        }
        GradModule::Backbone => {
            let images = Tensor::uniform(&[b, 3, h, w], 0.0, 1.0, &mut rng);
            let wts = probe(&[b, c, fh, fw], &mut rng);
            let main = backbone::ConvBackbone::new(backbone::PseudoSiamese::MAIN_PREFIX, config);
            let build = move |s: &mut Session<'_>, v: &[Var]| -> Result<Var> {
                let f = backbone::extract_main_features(s, &main, v[0])?;
                weighted_sum(s, f, &wts)
            };
            let store = model.params;
            check_scalar(
                module,
                &store,
                &[images],
                |n| n.starts_with(backbone::PseudoSiamese::MAIN_PREFIX),
                &build,
                opts,
            )
        }
        GradModule::ExemplarSim => {
            let g = config.exemplar_grid;
            let grid = Tensor::randn(&[b, c, g, g], 1.0, &mut rng);
            let wts = probe(&[b, t, c], &mut rng);
            let cfg = config.clone();
            let build = move |s: &mut Session<'_>, v: &[Var]| -> Result<Var> {
                let tok = exemplar_sim::simulate(s, v[0], cfg.unfold_kernel, cfg.unfold_stride, cfg.sub_patch)?;
                weighted_sum(s, tok, &wts)
            };
            let store = model.params;
            check_scalar(
                module,
                &store,
                &[grid],
                |n| n.starts_with(exemplar_sim::TOKENIZER_PREFIX),
                &build,
                opts,
            )
        }
        GradModule::Dass => {
            let feats = Tensor::randn(&[b, c, fh, fw], 1.0, &mut rng);
            let tokens = Tensor::randn(&[b, t, c], 1.0, &mut rng);
            let wts = probe(&[b, fh, fw], &mut rng);
            let flags = config.flags;
            let build = move |s: &mut Session<'_>, v: &[Var]| -> Result<Var> {
                let aniso = flags.recalibration.then(|| dass::anisotropic_encode(s, v[0])).transpose()?;
                let dw = if flags.recalibration && flags.condenser {
                    Some(dass::direction_weights(s, v[1])?)
                } else if flags.recalibration {
                    Some(dass::uniform_direction_weights(&mut s.graph, b))
                } else {
                    None
                };
                let f = dass::integrate_features(s, v[0], aniso.as_ref(), dw)?;
                let tw = if flags.condenser {
                    let gram = dass::gram_matrix(&mut s.graph, v[0])?;
                    dass::token_weights(s, gram)?
                } else {
                    dass::uniform_token_weights(&mut s.graph, b, t)
                };
                let tok = dass::recalibrate_token(&mut s.graph, v[1], tw)?;
                let sim = dass::similarity_map(&mut s.graph, f, tok)?;
                weighted_sum(s, sim, &wts)
            };
            let store = model.params;
            check_scalar(module, &store, &[feats, tokens], |n| n.starts_with("dass."), &build, opts)
        }
        GradModule::Counter => {
            let feats = Tensor::randn(&[b, c, fh, fw], 1.0, &mut rng);
            let sim = Tensor::randn(&[b, fh, fw], 1.0, &mut rng);
            let wts = probe(&[b], &mut rng);
            let layers = config.head_widths.len();
            let mut store = ParamStore::new();
            counter::register_head(&mut store, c, &config.head_widths, &mut rng);
            let build = move |s: &mut Session<'_>, v: &[Var]| -> Result<Var> {
                let x = counter::pool_correlation(&mut s.graph, v[0], v[1])?;
                let n = counter::regress_count(s, x, layers)?;
                weighted_sum(s, n, &wts)
            };
            check_scalar(module, &store, &[feats, sim], |_| true, &build, opts)
        }
    }
}

/// Sets every trainable tensor whose name starts with `prefix` to zero.
pub fn zero_params(store: &mut ParamStore, prefix: &str) {
    let names: Vec<String> = store
        .iter()
        .filter(|(n, e)| n.starts_with(prefix) && e.kind == ParamKind::Trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for n in names {
        store.get_mut(&n).expect("listed").data_mut().fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradCheckOptions {
        GradCheckOptions {
            batch: 1,
            ..Default::default()
        }
    }

    #[test]
    fn linear_is_exact() {
        let r = gradient_check(&ModelConfig::tiny(), GradModule::Linear, &quick()).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.skipped_kinks, 0);
    }

    #[test]
    fn submodules_pass() {
        for m in [GradModule::ExemplarSim, GradModule::Dass, GradModule::Counter] {
            let r = gradient_check(&ModelConfig::tiny(), m, &quick()).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn module_names_round_trip() {
        for m in GradModule::ALL {
            assert_eq!(m.to_string().parse::<GradModule>().unwrap(), m);
        }
        assert!("optimizer".parse::<GradModule>().is_err());
    }

    #[test]
    fn zeroed_head_gives_zero_upstream_gradients() {
        let mut model = Model::new(ModelConfig::tiny()).unwrap();
        zero_params(&mut model.params, counter::HEAD_PREFIX);
        let images = Tensor::uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut s = Session::new(&model.params, Mode::Train);
        let x = s.graph.variable(images);
        let out = model.forward(&mut s, x, None).unwrap();
        let mut g = s.graph.backward(out.count).unwrap();
        assert!(g.take(x).unwrap().data().iter().all(|&v| v == 0.0));
        let names: Vec<(String, Var)> = s.bound_params().iter().map(|(n, v)| (n.clone(), *v)).collect();
        for (n, v) in names {
            if !n.starts_with(counter::HEAD_PREFIX) {
                if let Some(t) = g.take(v) {
                    assert!(t.data().iter().all(|&x| x == 0.0), "{n}");
                }
            }
        }
    }
}
