use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use countnet::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Dtype};
use countnet::data::image_io::load_image;
use countnet::data::{
    fsc147, prepare_samples, resize_policy, synthetic, DatasetRecord, ResizeMode, Sample, Split,
};
use countnet::model::ablation_variant;
use countnet::train_eval::{
    ablation_csv, evaluate, gradient_check, run_ablation, train as train_model, EvalReport, GradCheckOptions,
    GradModule,
};
use countnet::viz::{save_heatmap, sidecar_path, Colormap};
use countnet::{AblationRow, Model, ModelConfig};
use log::info;

use crate::config::{self, RunConfig};
use crate::manifest::RunManifest;
use crate::ConfigArgs;

pub enum Outcome {
    Success,
    /// The command ran but its pass/fail gate failed.
    GateFailed,
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    config::load(args.config.as_deref(), &args.sets)
}

/// Records of one split from a synthetic directory or an FSC147 root.
fn open_split(dir: &Path, split: Split) -> Result<Vec<DatasetRecord>> {
    if !dir.exists() {
        bail!("dataset path {} does not exist", dir.display());
    }
    if dir.join(synthetic::MANIFEST_FILE).exists() {
        Ok(synthetic::load_dataset(dir, Some(split))?)
    } else if dir.join(fsc147::ANNOTATION_FILE).exists() {
        Ok(fsc147::load_fsc147(dir, split)?)
    } else {
        bail!(
            "dataset path {} holds neither {} nor {}",
            dir.display(),
            synthetic::MANIFEST_FILE,
            fsc147::ANNOTATION_FILE
        )
    }
}

fn samples(dir: &Path, split: Split, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let records = open_split(dir, split)?;
    prepare_samples(&records, &cfg.resize).with_context(|| format!("loading split `{split}` from {}", dir.display()))
}

fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn metrics_rows(reports: &[EvalReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| vec![r.step.to_string(), r.split.to_string(), r.mae.to_string(), r.mse.to_string()])
        .collect()
}

pub fn synth(out: &Path, counts: [usize; 3], seed: Option<u64>, args: &ConfigArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::start("synth");
    let mut cfg = load_config(args)?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let splits = [
        (Split::Train, counts[0]),
        (Split::Val, counts[1]),
        (Split::Test, counts[2]),
    ];
    let ds = synthetic::write_dataset(out, &cfg.synth, &splits)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    info!("wrote {} scenes to {}", ds.records.len(), out.display());
    manifest.seed = Some(cfg.synth.seed);
    manifest.artifacts.push(out.join(synthetic::MANIFEST_FILE));
    manifest.config = Some(cfg);
    manifest.finish(out)?;
    Ok(Outcome::Success)
}

pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";
pub const RESOLVED_CONFIG: &str = "config.toml";

pub fn train(data: &Path, out: &Path, ablation: Option<&str>, args: &ConfigArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::start("train");
    let mut cfg = load_config(args)?;
    if let Some(row) = ablation {
        cfg.model = ablation_variant(&cfg.model, row)?;
    }
    let train_set = samples(data, Split::Train, &cfg)?;
    if train_set.is_empty() {
        bail!("no training records in {}", data.display());
    }
    let val_set = samples(data, Split::Val, &cfg)?;
    info!(
        "{} training and {} validation images, {} parameters",
        train_set.len(),
        val_set.len(),
        Model::new(cfg.model.clone())?.param_count()
    );
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut model = Model::new(cfg.model.clone())?;
    let outcome = train_model(&mut model, &train_set, Some(&val_set), &cfg.train)?;
    let steps = outcome.loss_curve.len();

    let best_path = out.join(BEST);
    let last_path = out.join(LAST);
    let best = Checkpoint {
        config: cfg.model.clone(),
        params: outcome.best_params.clone(),
        optimizer: None,
        step: outcome.best_step.unwrap_or(steps),
    };
    save_checkpoint(&best_path, &best, Dtype::F64)?;
    save_checkpoint(&last_path, &Checkpoint::from_model(&model, Some(outcome.optimizer.clone()), steps), Dtype::F64)?;

    let loss_path = out.join("loss.csv");
    write_csv(
        &loss_path,
        &["step", "loss"],
        outcome
            .loss_curve
            .iter()
            .enumerate()
            .map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]),
    )?;
    let metrics_path = out.join("metrics.csv");
    write_csv(&metrics_path, &["step", "split", "mae", "mse"], metrics_rows(&outcome.history))?;
    let cfg_path = out.join(RESOLVED_CONFIG);
    fs::write(&cfg_path, toml::to_string_pretty(&cfg)?)?;
    if let Some(r) = outcome.history.iter().find(|r| Some(r.step) == outcome.best_step) {
        info!("best val MAE {:.4} (MSE {:.4}) at step {}", r.mae, r.mse, r.step);
    }

    manifest.seed = Some(cfg.train.seed);
    manifest.config = Some(cfg);
    manifest.artifacts = vec![best_path, last_path, loss_path, metrics_path, cfg_path];
    manifest.finish(out)?;
    Ok(Outcome::Success)
}

/// Run config for commands that start from a checkpoint: explicit `--config`
/// wins, otherwise the resolved config saved beside the checkpoint, otherwise
/// defaults. The model section always comes from the checkpoint.
fn config_for_checkpoint(checkpoint: &Path, args: &ConfigArgs) -> Result<RunConfig> {
    let beside = checkpoint.parent().map(|d| d.join(RESOLVED_CONFIG));
    let args = match (&args.config, beside) {
        (None, Some(p)) if p.exists() => ConfigArgs {
            config: Some(p),
            sets: args.sets.clone(),
        },
        _ => args.clone(),
    };
    load_config(&args)
}

fn run_dir(out: Option<&Path>, checkpoint: &Path, name: &str) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(name))
}

pub fn eval(checkpoint: &Path, data: &Path, split: Split, out: Option<&Path>, args: &ConfigArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::start("eval");
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let step = ckpt.step;
    let mut cfg = config_for_checkpoint(checkpoint, args)?;
    cfg.model = ckpt.config.clone();
    let model = ckpt.into_model()?;
    let set = samples(data, split, &cfg)?;
    if set.is_empty() {
        return Err(countnet::Error::EmptySplit(split.to_string())).with_context(|| format!("evaluating {}", data.display()));
    }
    let report = evaluate(&model, &set, split, step)?;

    let dir = run_dir(out, checkpoint, &format!("eval_{split}"));
    fs::create_dir_all(&dir)?;
    let metrics_path = dir.join("metrics.csv");
    write_csv(&metrics_path, &["step", "split", "mae", "mse"], metrics_rows(std::slice::from_ref(&report)))?;
    let preds_path = dir.join("predictions.csv");
    write_csv(
        &preds_path,
        &["id", "target", "prediction", "abs_error"],
        (0..report.ids.len()).map(|i| {
            vec![
                report.ids[i].clone(),
                report.targets[i].to_string(),
                report.predictions[i].to_string(),
                report.abs_errors[i].to_string(),
            ]
        }),
    )?;
    // Echo the CSV itself so the printed and stored metrics cannot diverge.
    print!("{}", fs::read_to_string(&metrics_path)?);

    manifest.config = Some(cfg);
    manifest.artifacts = vec![metrics_path, preds_path];
    manifest.finish(&dir)?;
    Ok(Outcome::Success)
}

pub fn predict(
    checkpoint: &Path,
    image: &Path,
    heatmap: Option<&Path>,
    colormap: Colormap,
    out: Option<&Path>,
    args: &ConfigArgs,
) -> Result<Outcome> {
    let mut manifest = RunManifest::start("predict");
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut cfg = config_for_checkpoint(checkpoint, args)?;
    cfg.model = ckpt.config.clone();
    let model = ckpt.into_model()?;
    let raw = load_image(image).with_context(|| format!("decoding {}", image.display()))?;
    let input = resize_policy(&raw, ResizeMode::TrainMain, &cfg.resize)?;
    let (h, w) = (input.dim(1), input.dim(2));
    let batch = input.reshape(&[1, 3, h, w])?;
    let pred = model.predict(&batch)?;
    let count = pred.counts[0].max(0.0);
    println!("{count}");

    if let Some(path) = heatmap {
        let sim = pred
            .similarity
            .ok_or_else(|| anyhow!("this model variant builds no similarity map"))?;
        save_heatmap(path, &sim.index_axis0(0), h, w, colormap)?;
        manifest.artifacts.push(path.to_path_buf());
        manifest.artifacts.push(sidecar_path(path));
    }
    manifest.config = Some(cfg);
    manifest.finish(&run_dir(out, checkpoint, "predict"))?;
    Ok(Outcome::Success)
}

pub fn gradcheck(module: GradModule, threshold: f64, batch: usize, out: &Path) -> Result<Outcome> {
    let mut manifest = RunManifest::start("gradcheck");
    let opts = GradCheckOptions {
        batch,
        ..GradCheckOptions::default()
    };
    let config = ModelConfig::tiny();
    let report = gradient_check(&config, module, &opts)?;
    println!(
        "module={} checked={} skipped_kinks={} max_rel_error={:e} worst={}",
        report.module, report.checked, report.skipped_kinks, report.max_rel_error, report.worst
    );
    fs::create_dir_all(out)?;
    let path = out.join("gradcheck.json");
    fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
    manifest.seed = Some(opts.seed);
    manifest.config = Some(RunConfig {
        preset: Some("tiny".into()),
        model: config,
        ..Default::default()
    });
    manifest.artifacts.push(path);
    manifest.finish(out)?;
    if report.max_rel_error < threshold {
        Ok(Outcome::Success)
    } else {
        eprintln!("max relative error {:e} exceeds {threshold:e}", report.max_rel_error);
        Ok(Outcome::GateFailed)
    }
}

pub fn ablation(data: &Path, out: &Path, rows: &[String], args: &ConfigArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::start("ablation");
    let cfg = load_config(args)?;
    let rows = rows
        .iter()
        .map(|r| r.parse::<AblationRow>())
        .collect::<countnet::Result<Vec<_>>>()?;
    let train_set = samples(data, Split::Train, &cfg)?;
    let mut eval_sets = Vec::new();
    for split in [Split::Val, Split::Test] {
        let s = samples(data, split, &cfg)?;
        if !s.is_empty() {
            eval_sets.push((split, s));
        }
    }
    if eval_sets.is_empty() {
        eval_sets.push((Split::Train, train_set.clone()));
    }
    let eval: Vec<(Split, &[Sample])> = eval_sets.iter().map(|(s, v)| (*s, v.as_slice())).collect();
    let results = run_ablation(&cfg.model, &rows, &train_set, &eval, &cfg.train)?;
    let splits: Vec<Split> = eval.iter().map(|(s, _)| *s).collect();
    let table = ablation_csv(&results, &splits);
    fs::create_dir_all(out)?;
    let path = out.join("ablation.csv");
    fs::write(&path, &table)?;
    print!("{table}");

    manifest.seed = Some(cfg.train.seed);
    manifest.config = Some(cfg);
    manifest.artifacts.push(path);
    manifest.finish(out)?;
    if results.iter().any(|r| r.error.is_some()) {
        Ok(Outcome::GateFailed)
    } else {
        Ok(Outcome::Success)
    }
}
