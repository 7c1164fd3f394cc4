//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line per criterion; exits nonzero if any failed.
//!
//! `FSC147_ROOT` points criterion 8 at a full dataset copy when available.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use countnet::counter::pool_correlation;
use countnet::data::{fsc147, generate_range, prepare_samples, AugmentationConfig, ResizePolicy, Sample, Split, SyntheticSceneSpec};
use countnet::dass::{self, anisotropic_encode, gram_matrix, recalibrate_token, similarity_map};
use countnet::exemplar_sim::{average_patches, register_tokenizer, tokenize_exemplar, unfold_patches, TOKENIZER_PREFIX};
use countnet::train_eval::{
    ablation_csv, evaluate, gradient_check, loss_exemplar_variant, loss_l2, mae_rmse, run_ablation, train, EvalReport,
    GradCheckOptions, GradModule, LrSchedule, TrainConfig, TrainOutcome,
};
use countnet::{AblationRow, Graph, Mode, Model, ModelConfig, ParamStore, Session, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

const DOUBLE_TOL: f64 = 1e-12;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Brute-force oracles.

fn oracle_unfold(grid: &Tensor, k: usize, stride: usize) -> Tensor {
    let (b, c, h, w) = (grid.dim(0), grid.dim(1), grid.dim(2), grid.dim(3));
    let ny = (h - k) / stride + 1;
    let nx = (w - k) / stride + 1;
    let mut out = Tensor::zeros(&[b, ny * nx, c, k, k]);
    for bi in 0..b {
        for py in 0..ny {
            for px in 0..nx {
                for ci in 0..c {
                    for i in 0..k {
                        for j in 0..k {
                            let v = grid.at(&[bi, ci, py * stride + i, px * stride + j]);
                            out.set(&[bi, py * nx + px, ci, i, j], v);
                        }
                    }
                }
            }
        }
    }
    out
}

fn oracle_average(patches: &Tensor) -> Tensor {
    let s = patches.shape();
    let (b, n, c, k) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[b, c, k, k]);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..k {
                for j in 0..k {
                    let sum: f64 = (0..n).map(|w| patches.at(&[bi, w, ci, i, j])).sum();
                    out.set(&[bi, ci, i, j], sum / n as f64);
                }
            }
        }
    }
    out
}

fn oracle_tokenize(patch: &Tensor, sub: usize, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (b, c, k) = (patch.dim(0), patch.dim(1), patch.dim(2));
    let side = k / sub;
    let mut out = Tensor::zeros(&[b, side * side, c]);
    for bi in 0..b {
        for ty in 0..side {
            for tx in 0..side {
                let mut flat = Vec::new();
                for ci in 0..c {
                    for dy in 0..sub {
                        for dx in 0..sub {
                            flat.push(patch.at(&[bi, ci, ty * sub + dy, tx * sub + dx]));
                        }
                    }
                }
                for o in 0..c {
                    let mut acc = bias.at(&[o]);
                    for (i, v) in flat.iter().enumerate() {
                        acc += weight.at(&[o, i]) * v;
                    }
                    out.set(&[bi, ty * side + tx, o], acc);
                }
            }
        }
    }
    out
}

fn oracle_conv_same(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (b, ci, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, kh, kw) = (weight.dim(0), weight.dim(2), weight.dim(3));
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = Tensor::zeros(&[b, co, h, w]);
    for bi in 0..b {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.at(&[o]);
                    for i in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let sy = y as isize + dy as isize - ph;
                                let sx = xx as isize + dx as isize - pw;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += weight.at(&[o, i, dy, dx]) * x.at(&[bi, i, sy as usize, sx as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[bi, o, y, xx], acc);
                }
            }
        }
    }
    out
}

fn oracle_gram(f: &Tensor) -> Tensor {
    let (b, c, h, w) = (f.dim(0), f.dim(1), f.dim(2), f.dim(3));
    let mut out = Tensor::zeros(&[b, c, c]);
    for bi in 0..b {
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += f.at(&[bi, i, y, x]) * f.at(&[bi, j, y, x]);
                    }
                }
                out.set(&[bi, i, j], acc);
            }
        }
    }
    out
}

fn oracle_recalibrate(tokens: &Tensor, weights: &Tensor) -> Tensor {
    Tensor::from_fn(tokens.shape(), |i| {
        let t = tokens.at(i);
        weights.at(&[i[0], i[1]]) * t + t
    })
}

fn oracle_similarity(f: &Tensor, tokens: &Tensor) -> Tensor {
    let (b, c, h, w) = (f.dim(0), f.dim(1), f.dim(2), f.dim(3));
    let t = tokens.dim(1);
    let mut out = Tensor::zeros(&[b, h, w]);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for j in 0..t {
                    for ci in 0..c {
                        acc += f.at(&[bi, ci, y, x]) * tokens.at(&[bi, j, ci]);
                    }
                }
                out.set(&[bi, y, x], acc / t as f64);
            }
        }
    }
    out
}

fn oracle_pool(f: &Tensor, s: &Tensor) -> Tensor {
    let (b, c, h, w) = (f.dim(0), f.dim(1), f.dim(2), f.dim(3));
    let mut out = Tensor::zeros(&[b, c]);
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += s.at(&[bi, y, x]) * f.at(&[bi, ci, y, x]);
                }
            }
            out.set(&[bi, ci], acc);
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

// ---------------------------------------------------------------------------
// Criteria.

fn small_config(c: usize, rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        channels: c,
        aniso_kernel_h: [1, 3, 5][rng.random_range(0..3)],
        aniso_kernel_v: [1, 3, 5][rng.random_range(0..3)],
        direction_hidden: rng.random_range(2..12),
        unfold_kernel: 4,
        sub_patch: 2,
        seed: rng.random(),
        ..ModelConfig::tiny()
    }
}

fn criterion_oracles() -> Check {
    const INSTANCES: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 8];
    for _ in 0..INSTANCES {
        let b = rng.random_range(1..3);
        let c = rng.random_range(1..5);
        let h = rng.random_range(4..9);
        let w = rng.random_range(4..9);
        let k = rng.random_range(1..=h.min(w));
        let stride = rng.random_range(1..3);
        let grid = randn(&[b, c, h, w], &mut rng);

        let mut g = Graph::new();
        let x = g.constant(grid.clone());
        let p = unfold_patches(&mut g, x, k, stride).map_err(|e| e.to_string())?;
        let want_p = oracle_unfold(&grid, k, stride);
        worst[0] = worst[0].max(max_diff(g.value(p), &want_p));
        let m = average_patches(&mut g, p).map_err(|e| e.to_string())?;
        worst[1] = worst[1].max(max_diff(g.value(m), &oracle_average(&want_p)));

        let sub = [1, 2][rng.random_range(0..2)];
        let side = 2 * rng.random_range(1..3);
        let mut store = ParamStore::new();
        register_tokenizer(&mut store, c, sub, &mut rng);
        let patch = randn(&[b, c, side, side], &mut rng);
        let mut s = Session::frozen(&store, Mode::Eval);
        let pv = s.graph.constant(patch.clone());
        let t = tokenize_exemplar(&mut s, TOKENIZER_PREFIX, pv, sub).map_err(|e| e.to_string())?;
        let wt = store.get(&format!("{TOKENIZER_PREFIX}.weight")).unwrap();
        let bt = store.get(&format!("{TOKENIZER_PREFIX}.bias")).unwrap();
        worst[2] = worst[2].max(max_diff(s.graph.value(t), &oracle_tokenize(&patch, sub, wt, bt)));

        let cfg = small_config(c, &mut rng);
        let mut store = ParamStore::new();
        dass::register(&mut store, &cfg, &mut rng);
        let mut s = Session::frozen(&store, Mode::Eval);
        let fv = s.graph.constant(grid.clone());
        let a = anisotropic_encode(&mut s, fv).map_err(|e| e.to_string())?;
        for (var, prefix) in [(a.horizontal, dass::HORIZONTAL), (a.vertical, dass::VERTICAL), (a.basis, dass::BASIS)] {
            let want = oracle_conv_same(
                &grid,
                store.get(&format!("{prefix}.weight")).unwrap(),
                store.get(&format!("{prefix}.bias")).unwrap(),
            );
            worst[3] = worst[3].max(max_diff(s.graph.value(var), &want));
        }

        let mut g = Graph::new();
        let fv = g.constant(grid.clone());
        let gram = gram_matrix(&mut g, fv).map_err(|e| e.to_string())?;
        worst[4] = worst[4].max(max_diff(g.value(gram), &oracle_gram(&grid)));

        let ntok = rng.random_range(1..6);
        let tokens = randn(&[b, ntok, c], &mut rng);
        let weights = Tensor::uniform(&[b, ntok], 0.0, 1.0, &mut rng);
        let tv = g.constant(tokens.clone());
        let wv = g.constant(weights.clone());
        let r = recalibrate_token(&mut g, tv, wv).map_err(|e| e.to_string())?;
        worst[5] = worst[5].max(max_diff(g.value(r), &oracle_recalibrate(&tokens, &weights)));

        let sim = similarity_map(&mut g, fv, tv).map_err(|e| e.to_string())?;
        let want_s = oracle_similarity(&grid, &tokens);
        worst[6] = worst[6].max(max_diff(g.value(sim), &want_s));

        let smap = randn(&[b, h, w], &mut rng);
        let sv = g.constant(smap.clone());
        let x = pool_correlation(&mut g, fv, sv).map_err(|e| e.to_string())?;
        worst[7] = worst[7].max(max_diff(g.value(x), &oracle_pool(&grid, &smap)));
    }
    let names = ["unfold", "average", "tokenize", "anisotropic", "gram", "recalibrate", "similarity", "pool"];
    for (n, e) in names.iter().zip(worst) {
        ensure(e < DOUBLE_TOL, || format!("{n} max abs error {e:e} >= {DOUBLE_TOL:e}"))?;
    }
    let overall = worst.iter().cloned().fold(0.0, f64::max);
    Ok(format!("8 ops x {INSTANCES} instances, max abs error {overall:.1e}"))
}

fn criterion_simplex() -> Check {
    const RUNS: usize = 1000;
    const TOL: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut dir_err, mut tok_err) = (0.0f64, 0.0f64);
    for _ in 0..RUNS {
        let c = rng.random_range(1..7);
        let cfg = small_config(c, &mut rng);
        let mut store = ParamStore::new();
        dass::register(&mut store, &cfg, &mut rng);
        let b = rng.random_range(1..4);
        let mut s = Session::frozen(&store, Mode::Eval);
        let tokens = s.graph.constant(Tensor::randn(&[b, cfg.token_count(), c], 3.0, &mut rng));
        let dw = dass::direction_weights(&mut s, tokens).map_err(|e| e.to_string())?;
        let feats = s.graph.constant(Tensor::randn(&[b, c, 3, 4], 2.0, &mut rng));
        let gram = gram_matrix(&mut s.graph, feats).map_err(|e| e.to_string())?;
        let tw = dass::token_weights(&mut s, gram).map_err(|e| e.to_string())?;
        for (var, err) in [(dw, &mut dir_err), (tw, &mut tok_err)] {
            let v = s.graph.value(var);
            let n = v.dim(1);
            for bi in 0..b {
                let row: Vec<f64> = (0..n).map(|j| v.at(&[bi, j])).collect();
                ensure(row.iter().all(|&x| x >= 0.0), || format!("negative weight in {row:?}"))?;
                *err = err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(dir_err <= TOL, || format!("direction weights sum off by {dir_err:e}"))?;
    ensure(tok_err <= TOL, || format!("token weights sum off by {tok_err:e}"))?;
    Ok(format!("{RUNS} parameterizations, max |sum-1| direction {dir_err:.1e}, token {tok_err:.1e}"))
}

fn criterion_gram() -> Check {
    const MAPS: usize = 500;
    const TOL: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut asym, mut min_eig) = (0.0f64, f64::INFINITY);
    for i in 0..MAPS {
        let c = rng.random_range(1..9);
        let h = rng.random_range(1..7);
        let w = rng.random_range(1..7);
        let f = randn(&[1, c, h, w], &mut rng);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let gv = gram_matrix(&mut g, fv).map_err(|e| e.to_string())?;
        let gram = g.value(gv).clone();
        let m: Vec<Vec<f64>> = (0..c).map(|r| (0..c).map(|k| gram.at(&[0, r, k])).collect()).collect();
        for r in 0..c {
            for k in 0..c {
                asym = asym.max((m[r][k] - m[k][r]).abs());
            }
        }
        let eig = jacobi_eigenvalues(m);
        min_eig = min_eig.min(eig.iter().cloned().fold(f64::INFINITY, f64::min));

        // Integer-valued features make every product and partial sum exact,
        // so invariance under reordering the positions must hold bitwise.
        let fi = Tensor::from_fn(&[1, c, h, w], |_| rng.random_range(-8..=8) as f64);
        let mut perm: Vec<usize> = (0..h * w).collect();
        for j in (1..perm.len()).rev() {
            perm.swap(j, rng.random_range(0..=j));
        }
        let shuffled = Tensor::from_fn(&[1, c, h, w], |ix| {
            let src = perm[ix[2] * w + ix[3]];
            fi.at(&[0, ix[1], src / w, src % w])
        });
        let mut g = Graph::new();
        let a = g.constant(fi);
        let b = g.constant(shuffled);
        let ga = gram_matrix(&mut g, a).map_err(|e| e.to_string())?;
        let gb = gram_matrix(&mut g, b).map_err(|e| e.to_string())?;
        ensure(g.value(ga).data() == g.value(gb).data(), || format!("map {i}: permuted Gram differs"))?;
    }
    ensure(asym <= TOL, || format!("asymmetry {asym:e}"))?;
    ensure(min_eig >= -TOL, || format!("min eigenvalue {min_eig:e}"))?;
    Ok(format!(
        "{MAPS} maps, max asymmetry {asym:.1e}, min eigenvalue {min_eig:.1e}, permutation invariance exact"
    ))
}

fn criterion_gradcheck() -> Check {
    const TOL: f64 = 1e-4;
    const BUDGET: Duration = Duration::from_secs(120);
    let t = Instant::now();
    let opts = GradCheckOptions {
        batch: 1,
        ..GradCheckOptions::default()
    };
    let r = gradient_check(&ModelConfig::tiny(), GradModule::All, &opts).map_err(|e| e.to_string())?;
    let dt = t.elapsed();
    ensure(r.max_rel_error < TOL, || {
        format!(
            "max relative error {:e} at {} (analytic {:e}, numeric {:e})",
            r.max_rel_error, r.worst, r.worst_analytic, r.worst_numeric
        )
    })?;
    ensure(dt < BUDGET, || format!("took {dt:?}, budget {BUDGET:?}"))?;
    Ok(format!(
        "{} entries, {} kink-skipped, max relative error {:.1e} in {:.0?}",
        r.checked, r.skipped_kinks, r.max_rel_error, dt
    ))
}

struct DeskData {
    train: Vec<Sample>,
    held_out: Vec<Sample>,
}

const DESK_CANVAS: usize = 64;

fn desk_data() -> Result<DeskData, String> {
    let spec = SyntheticSceneSpec {
        canvas: (DESK_CANVAS, DESK_CANVAS),
        count_range: (1, 20),
        seed: 7,
        ..Default::default()
    };
    let policy = ResizePolicy {
        min_side: DESK_CANVAS,
        max_side: DESK_CANVAS,
        ..Default::default()
    };
    let train = generate_range(&spec, 0, 64, Split::Train).map_err(|e| e.to_string())?;
    let held = generate_range(&spec, 64, 32, Split::Test).map_err(|e| e.to_string())?;
    Ok(DeskData {
        train: prepare_samples(&train, &policy).map_err(|e| e.to_string())?,
        held_out: prepare_samples(&held, &policy).map_err(|e| e.to_string())?,
    })
}

fn desk_train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        max_steps: steps,
        eval_interval: 0,
        augmentation: Some(AugmentationConfig {
            cutout_count: 0,
            ..Default::default()
        }),
        lr_schedule: LrSchedule::Cosine { final_fraction: 0.01 },
        ..Default::default()
    }
}

struct DeskRun {
    outcome: TrainOutcome,
    model: Model,
    elapsed: Duration,
}

fn desk_run(data: &DeskData) -> Result<DeskRun, String> {
    let t = Instant::now();
    let mut model = Model::new(ModelConfig::desk()).map_err(|e| e.to_string())?;
    let outcome = train(&mut model, &data.train, None, &desk_train_config(2000)).map_err(|e| e.to_string())?;
    Ok(DeskRun {
        outcome,
        model,
        elapsed: t.elapsed(),
    })
}

fn check_report(r: &EvalReport, reports: &mut Vec<EvalReport>) {
    reports.push(r.clone());
}

fn criterion_desk(data: &DeskData, run: &DeskRun, reports: &mut Vec<EvalReport>) -> Check {
    const BUDGET: Duration = Duration::from_secs(600);
    let steps = run.outcome.loss_curve.len();
    ensure(steps <= 2000, || format!("{steps} steps"))?;
    let tr = evaluate(&run.model, &data.train, Split::Train, steps).map_err(|e| e.to_string())?;
    let te = evaluate(&run.model, &data.held_out, Split::Test, steps).map_err(|e| e.to_string())?;
    check_report(&tr, reports);
    check_report(&te, reports);
    let detail = format!(
        "{steps} steps in {:.0?}, train MAE {:.3}, held-out MAE {:.3} (MSE {:.3})",
        run.elapsed, tr.mae, te.mae, te.mse
    );
    ensure(tr.mae < 1.0, || format!("train MAE {:.3} >= 1.0; {detail}", tr.mae))?;
    ensure(te.mae < 3.0, || format!("held-out MAE {:.3} >= 3.0; {detail}", te.mae))?;
    ensure(run.elapsed < BUDGET, || format!("over budget; {detail}"))?;
    Ok(detail)
}

fn criterion_ablation(data: &DeskData, reports: &mut Vec<EvalReport>) -> Check {
    const STEPS: usize = 200;
    let rows: Vec<AblationRow> = ["B0", "B1", "B2", "B3", "B4"].iter().map(|r| r.parse().unwrap()).collect();
    let results = run_ablation(
        &ModelConfig::desk(),
        &rows,
        &data.train,
        &[(Split::Test, &data.held_out)],
        &desk_train_config(STEPS),
    )
    .map_err(|e| e.to_string())?;
    let csv = ablation_csv(&results, &[Split::Test]);
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let mae_col = header.iter().position(|h| *h == "test_mae").ok_or("no test_mae column")?;
    let mse_col = header.iter().position(|h| *h == "test_mse").ok_or("no test_mse column")?;
    let body: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    ensure(body.len() == 5, || format!("{} CSV rows", body.len()))?;
    for row in &body {
        for col in [mae_col, mse_col] {
            let v: f64 = row[col].parse().map_err(|_| format!("row {}: `{}` is not a number", row[0], row[col]))?;
            ensure(v.is_finite(), || format!("row {}: non-finite metric", row[0]))?;
        }
    }
    for r in &results {
        if let Some(e) = &r.error {
            return Err(format!("{:?} failed: {e}", r.row));
        }
        for rep in &r.reports {
            check_report(rep, reports);
        }
    }
    let b0 = results[0].param_count;
    let b4 = results[4].param_count;
    ensure(b4 > b0, || format!("B4 has {b4} parameters, B0 {b0}"))?;
    let maes: Vec<String> = results
        .iter()
        .map(|r| format!("{:?}={:.2}", r.row, r.reports[0].mae))
        .collect();
    Ok(format!(
        "5 rows x {STEPS} steps, params B0 {b0} < B4 {b4}; held-out MAE (not gated) {}",
        maes.join(" ")
    ))
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn criterion_metrics(reports: &[EvalReport]) -> Check {
    const TOL: f64 = 1e-9;
    let text = std::fs::read_to_string(fixture_dir().join("metrics50.csv")).map_err(|e| e.to_string())?;
    let (mut preds, mut targets) = (Vec::new(), Vec::new());
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        targets.push(f[1].parse::<f64>().map_err(|e| e.to_string())?);
        preds.push(f[2].parse::<f64>().map_err(|e| e.to_string())?);
    }
    ensure(preds.len() == 50, || format!("{} fixture records", preds.len()))?;
    // Independent computation: clamp, sort the terms, sum smallest first.
    let mut abs: Vec<f64> = preds.iter().zip(&targets).map(|(p, t)| (p.max(0.0) - t).abs()).collect();
    abs.sort_by(f64::total_cmp);
    let n = abs.len() as f64;
    let mae_ref = abs.iter().sum::<f64>() / n;
    let mse_ref = (abs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let (mae, mse) = mae_rmse(&preds, &targets).map_err(|e| e.to_string())?;
    ensure((mae - mae_ref).abs() < TOL, || format!("MAE {mae} vs oracle {mae_ref}"))?;
    ensure((mse - mse_ref).abs() < TOL, || format!("MSE {mse} vs oracle {mse_ref}"))?;

    let fixture_report =
        EvalReport::new(Split::Test, 0, (0..50).map(|i| format!("r{i:02}")).collect(), &preds, &targets).map_err(|e| e.to_string())?;
    let all: Vec<&EvalReport> = reports.iter().chain(std::iter::once(&fixture_report)).collect();
    for r in &all {
        ensure(r.mae <= r.mse + 1e-12, || format!("report {} step {}: MAE {} > MSE {}", r.split, r.step, r.mae, r.mse))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..30.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(0..25) as f64).collect();
        let a = loss_exemplar_variant(&p, Some(&p), &t).map_err(|e| e.to_string())?;
        let b = loss_l2(&p, &t).map_err(|e| e.to_string())?;
        worst = worst.max((a - b).abs() / b.abs().max(1.0));
    }
    ensure(worst < 1e-12, || format!("exemplar loss differs from main loss by {worst:e}"))?;
    Ok(format!(
        "fixture MAE {mae:.6} MSE {mse:.6} match oracle; MAE <= MSE on {} reports; exemplar loss = main loss",
        all.len()
    ))
}

fn criterion_fsc147() -> Check {
    let t = Instant::now();
    let root = fixture_dir().join("fsc147_mini");
    let raw: serde_json::Value = serde_json::from_slice(
        &std::fs::read(root.join(fsc147::ANNOTATION_FILE)).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let mut seen = 0;
    let mut zero = false;
    let mut seven = false;
    for split in [Split::Train, Split::Val, Split::Test] {
        for r in fsc147::load_fsc147(&root, split).map_err(|e| e.to_string())? {
            let points = raw[&r.id]["points"].as_array().map(Vec::len).ok_or("fixture entry without points")?;
            ensure(r.count as usize == points, || format!("{}: count {} vs {points} points", r.id, r.count))?;
            ensure(r.split == split, || format!("{} in wrong split", r.id))?;
            zero |= points == 0;
            seven |= points == 7;
            seen += 1;
        }
    }
    ensure(seen == 5, || format!("{seen} fixture records"))?;
    ensure(zero && seven, || "fixture lacks the 0- or 7-point image".into())?;
    let dt = t.elapsed();
    ensure(dt < Duration::from_secs(1), || format!("fixture took {dt:?}"))?;
    let full = match std::env::var_os("FSC147_ROOT") {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            let mut sizes = Vec::new();
            for split in [Split::Train, Split::Test, Split::Val] {
                let n = fsc147::load_fsc147(&dir, split).map_err(|e| e.to_string())?.len();
                ensure(n == fsc147::Fsc147Split::expected_len(split), || format!("{split} has {n} records"))?;
                sizes.push(n.to_string());
            }
            format!("full dataset {}", sizes.join("/"))
        }
        None => "full dataset not present (FSC147_ROOT unset), size check skipped".into(),
    };
    Ok(format!("5-image fixture in {dt:.1?}; {full}"))
}

fn criterion_determinism(a: &DeskRun, b: &DeskRun) -> Check {
    ensure(a.outcome.loss_curve == b.outcome.loss_curve, || {
        let i = a.outcome.loss_curve.iter().zip(&b.outcome.loss_curve).position(|(x, y)| x != y);
        format!("loss curves diverge at step {i:?}")
    })?;
    let pa: Vec<(&str, &[f64])> = a.model.params.iter().map(|(n, e)| (n, e.tensor.data())).collect();
    let pb: Vec<(&str, &[f64])> = b.model.params.iter().map(|(n, e)| (n, e.tensor.data())).collect();
    ensure(pa == pb, || "final parameters differ".into())?;
    Ok(format!(
        "{} identical loss values, {} identical tensors",
        a.outcome.loss_curve.len(),
        pa.len()
    ))
}

fn report(id: u32, name: &str, started: Instant, result: Check, failures: &mut Vec<u32>) {
    let dt = started.elapsed();
    match result {
        Ok(detail) => println!("PASS [{id}] {name}: {detail} [{dt:.1?}]"),
        Err(why) => {
            println!("FAIL [{id}] {name}: {why} [{dt:.1?}]");
            failures.push(id);
        }
    }
}

fn main() -> ExitCode {
    // Respect the standard harness's `--list` probe and name filters loosely.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut failures = Vec::new();
    let mut reports = Vec::new();

    let t = Instant::now();
    report(1, "oracle equivalence", t, criterion_oracles(), &mut failures);
    let t = Instant::now();
    report(2, "simplex invariants", t, criterion_simplex(), &mut failures);
    let t = Instant::now();
    report(3, "Gram properties", t, criterion_gram(), &mut failures);
    let t = Instant::now();
    report(4, "gradient check", t, criterion_gradcheck(), &mut failures);

    let t = Instant::now();
    let runs = desk_data().and_then(|d| {
        let a = desk_run(&d)?;
        let b = desk_run(&d)?;
        Ok((d, a, b))
    });
    match &runs {
        Ok((d, a, _)) => report(5, "desk-scale learning", t, criterion_desk(d, a, &mut reports), &mut failures),
        Err(e) => report(5, "desk-scale learning", t, Err(e.clone()), &mut failures),
    }
    let t = Instant::now();
    match &runs {
        Ok((d, _, _)) => report(6, "ablation harness", t, criterion_ablation(d, &mut reports), &mut failures),
        Err(e) => report(6, "ablation harness", t, Err(e.clone()), &mut failures),
    }
    let t = Instant::now();
    report(7, "metric correctness", t, criterion_metrics(&reports), &mut failures);
    let t = Instant::now();
    report(8, "FSC147 ingestion", t, criterion_fsc147(), &mut failures);
    let t = Instant::now();
    match &runs {
        Ok((_, a, b)) => report(9, "determinism", t, criterion_determinism(a, b), &mut failures),
        Err(e) => report(9, "determinism", t, Err(e.clone()), &mut failures),
    }

    if failures.is_empty() {
        println!("acceptance: 9/9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} of 9 criteria failed: {failures:?}", failures.len());
        ExitCode::FAILURE
    }
}
