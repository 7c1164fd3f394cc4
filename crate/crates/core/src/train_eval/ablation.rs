//! Trains each ablation row under one budget and tabulates the metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::EvalReport;
use super::train::{evaluate, train, TrainConfig};
use crate::config::{AblationFlags, ModelConfig};
use crate::data::{Sample, Split};
use crate::error::{Error, Result};
use crate::model::{AblationRow, Model};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub flags: AblationFlags,
    pub param_count: usize,
    /// One report per evaluated split, in the order requested.
    pub reports: Vec<EvalReport>,
    /// Set when this row failed; other rows still run.
    pub error: Option<String>,
}

/// Trains every row from the same seed with the same budget, then evaluates
/// the best parameters on each split in `eval`. The first eval split also
/// drives best-checkpoint selection.
pub fn run_ablation(
    base: &ModelConfig,
    rows: &[AblationRow],
    train_set: &[Sample],
    eval: &[(Split, &[Sample])],
    cfg: &TrainConfig,
) -> Result<Vec<AblationResult>> {
    if rows.is_empty() {
        return Err(Error::Config("ablation needs at least one row".into()));
    }
    let mut out = Vec::with_capacity(rows.len());
    for &row in rows {
        let config = ModelConfig {
            flags: row.flags(),
            ..base.clone()
        };
        let mut result = AblationResult {
            row,
            flags: row.flags(),
            param_count: 0,
            reports: Vec::new(),
            error: None,
        };
        let run = || -> Result<(usize, Vec<EvalReport>)> {
            let mut model = Model::new(config.clone())?;
            let count = model.param_count();
            let val = eval.first().map(|(_, s)| *s);
            let outcome = train(&mut model, train_set, val, cfg)?;
            let step = outcome.loss_curve.len();
            model.params = outcome.best_params;
            let reports = eval
                .iter()
                .map(|(split, samples)| evaluate(&model, samples, *split, step))
                .collect::<Result<Vec<_>>>()?;
            Ok((count, reports))
        };
        match run() {
            Ok((count, reports)) => {
                result.param_count = count;
                result.reports = reports;
            }
            Err(e) => {
                log::error!("ablation row {row} failed: {e}");
                result.param_count = Model::new(config).map(|m| m.param_count()).unwrap_or(0);
                result.error = Some(e.to_string());
            }
        }
        out.push(result);
    }
    Ok(out)
}

fn mark(on: bool) -> &'static str {
    if on {
        "yes"
    } else {
        "no"
    }
}

/// `row,M,D,C,params,<split>_mae,<split>_mse,...,error`
pub fn ablation_csv(results: &[AblationResult], splits: &[Split]) -> String {
    let mut s = String::from("row,M,D,C,params");
    for sp in splits {
        let _ = write!(s, ",{sp}_mae,{sp}_mse");
    }
    s.push_str(",error\n");
    for r in results {
        let _ = write!(
            s,
            "{},{},{},{},{}",
            r.row,
            mark(r.flags.recalibration),
            mark(r.flags.condenser),
            mark(r.flags.location_counter),
            r.param_count
        );
        for sp in splits {
            match r.reports.iter().find(|rep| rep.split == *sp) {
                Some(rep) => {
                    let _ = write!(s, ",{},{}", rep.mae, rep.mse);
                }
                None => s.push_str(",,"),
            }
        }
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(s, ",{err}");
    }
    s
}
