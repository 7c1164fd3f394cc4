//! MAE and root-mean-square error over per-image counts.

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub step: usize,
    pub mae: f64,
    /// Root-mean-square error, reported under the customary "MSE" name.
    pub mse: f64,
    pub ids: Vec<String>,
    /// Clamped predictions.
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
    pub abs_errors: Vec<f64>,
}

/// `(MAE, RMSE)` after clamping predictions to be non-negative.
pub fn mae_rmse(predictions: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptySplit("metrics".into()));
    }
    let n = predictions.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, t) in predictions.iter().zip(targets) {
        let e = p.max(0.0) - t;
        abs += e.abs();
        sq += e * e;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

impl EvalReport {
    pub fn new(split: Split, step: usize, ids: Vec<String>, predictions: &[f64], targets: &[f64]) -> Result<Self> {
        let (mae, mse) = mae_rmse(predictions, targets)?;
        let predictions: Vec<f64> = predictions.iter().map(|p| p.max(0.0)).collect();
        let abs_errors = predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).collect();
        Ok(EvalReport {
            split,
            step,
            mae,
            mse,
            ids,
            predictions,
            targets: targets.to_vec(),
            abs_errors,
        })
    }
}
