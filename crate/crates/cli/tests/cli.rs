use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn countnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_countnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("COUNTNET_DATA")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 8] = [
    "--set",
    "preset=\"tiny\"",
    "--set",
    "resize.min_side=64",
    "--set",
    "resize.max_side=64",
    "--set",
    "train.eval_interval=0",
];

fn synth(dir: &Path, train: &str, val: &str) {
    let o = countnet(&[
        "synth", "--out", s(dir), "--count", train, "--val-count", val, "--seed", "3", "--set", "synth.count_range=[2, 6]",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend(TINY);
    args.extend(extra);
    countnet(&args)
}

#[test]
fn synth_train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data, "4", "2");
    assert!(data.join("manifest.json").exists());
    assert!(data.join("run_manifest.json").exists());

    let o = train(
        &data,
        &run,
        &["--set", "train.max_steps=300", "--set", "train.learning_rate=1e-2", "--set", "train.batch_size=4"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["best.ckpt", "last.ckpt", "loss.csv", "metrics.csv", "config.toml", "run_manifest.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let losses: Vec<f64> = fs::read_to_string(run.join("loss.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 300);
    assert!(losses[losses.len() - 1] < losses[0]);

    // Overfit run: the checkpoint fits its own training images.
    let eval_dir = tmp.path().join("eval");
    let o = countnet(&[
        "eval", "--checkpoint", s(&run.join("last.ckpt")), "--data", s(&data), "--split", "train", "--out", s(&eval_dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = stdout(&o);
    assert_eq!(printed, fs::read_to_string(eval_dir.join("metrics.csv")).unwrap());
    let mae: f64 = printed.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!(mae < 1.0, "train MAE {mae}");
    assert_eq!(fs::read_to_string(eval_dir.join("predictions.csv")).unwrap().lines().count(), 5);

    let image = data.join("synth_000000.png");
    let heat = tmp.path().join("heat.png");
    let o = countnet(&[
        "predict", "--checkpoint", s(&run.join("best.ckpt")), "--image", s(&image), "--heatmap", s(&heat), "--out",
        s(&tmp.path().join("pred")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let count: f64 = stdout(&o).trim().parse().unwrap();
    assert!(count >= 0.0);
    let (w, h) = image::image_dimensions(&heat).unwrap();
    assert_eq!((w, h), (64, 64));
}

#[test]
fn ablation_flag_selects_row_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "2", "0");
    let run = tmp.path().join("run");
    let o = train(&data, &run, &["--ablation", "B3", "--set", "train.max_steps=2", "--set", "train.batch_size=2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg: toml::Table = fs::read_to_string(run.join("config.toml")).unwrap().parse().unwrap();
    let flags = cfg["model"]["flags"].as_table().unwrap();
    assert_eq!(flags["recalibration"].as_bool(), Some(true));
    assert_eq!(flags["condenser"].as_bool(), Some(false));
    assert_eq!(flags["location_counter"].as_bool(), Some(true));
}

#[test]
fn ablation_command_writes_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "2", "2");
    let out = tmp.path().join("abl");
    let mut args = vec!["ablation", "--data", s(&data), "--out", s(&out), "--rows", "B0,B4"];
    args.extend(TINY);
    args.extend(["--set", "train.max_steps=3", "--set", "train.batch_size=2"]);
    let o = countnet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("row,M,D,C,params,val_mae,val_mse"), "{csv}");
}

#[test]
fn missing_dataset_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let o = train(&missing, &tmp.path().join("run"), &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn schema_error_reports_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "preset = \"tiny\"\n[train]\nbatch_sise = 3\n").unwrap();
    let o = countnet(&["train", "--data", s(tmp.path()), "--out", s(tmp.path()), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn empty_split_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "2", "0");
    let run = tmp.path().join("run");
    assert!(train(&data, &run, &["--set", "train.max_steps=1", "--set", "train.batch_size=2"]).status.success());
    let o = countnet(&["eval", "--checkpoint", s(&run.join("last.ckpt")), "--data", s(&data), "--split", "test"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
}

#[test]
fn corrupt_image_fails_to_decode() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "2", "0");
    let run = tmp.path().join("run");
    assert!(train(&data, &run, &["--set", "train.max_steps=1", "--set", "train.batch_size=2"]).status.success());
    let bad = tmp.path().join("bad.png");
    fs::write(&bad, b"not an image").unwrap();
    let o = countnet(&["predict", "--checkpoint", s(&run.join("last.ckpt")), "--image", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("decoding"), "{}", stderr(&o));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain");
    fs::write(&file, b"").unwrap();
    let o = countnet(&["synth", "--out", s(&file.join("sub")), "--count", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

#[test]
fn gradcheck_gate_sets_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    let o = countnet(&["gradcheck", "--module", "linear", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("max_rel_error"));
    assert!(out.join("gradcheck.json").exists());
    let o = countnet(&["gradcheck", "--module", "linear", "--threshold", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
}
