//! Count regression losses, as plain values and as graph nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    #[default]
    L2,
}

fn check_len(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::LengthMismatch {
            predictions: pred.len(),
            targets: target.len(),
        });
    }
    Ok(())
}

/// `(1/B) Σ (N̂ − N)²`
pub fn loss_l2(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// `(1/B) Σ |N̂ − N|`
pub fn loss_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn loss(kind: LossKind, pred: &[f64], target: &[f64]) -> Result<f64> {
    match kind {
        LossKind::L1 => loss_l1(pred, target),
        LossKind::L2 => loss_l2(pred, target),
    }
}

/// `0.5 · L(aux) + 0.5 · L(main)` with the squared loss.
pub fn loss_exemplar_variant(main: &[f64], aux: Option<&[f64]>, target: &[f64]) -> Result<f64> {
    let aux = aux.ok_or(Error::MissingAuxiliary)?;
    Ok(0.5 * loss_l2(aux, target)? + 0.5 * loss_l2(main, target)?)
}

/// Graph form of [`loss`] for a `(B,)` prediction node.
pub fn graph_loss(g: &mut Graph, pred: Var, target: &[f64], kind: LossKind) -> Result<Var> {
    let n = g.shape(pred).iter().product::<usize>();
    if g.shape(pred).len() != 1 || n != target.len() || n == 0 {
        return Err(Error::LengthMismatch {
            predictions: n,
            targets: target.len(),
        });
    }
    let t = g.constant(Tensor::new(vec![n], target.to_vec())?);
    let diff = g.sub(pred, t)?;
    let per = match kind {
        LossKind::L2 => g.mul(diff, diff)?,
        LossKind::L1 => g.abs(diff),
    };
    Ok(g.mean(per))
}

/// Graph form of the exemplar-guided objective; `kind` applies to both terms.
pub fn graph_exemplar_loss(g: &mut Graph, main: Var, aux: Option<Var>, target: &[f64], kind: LossKind) -> Result<Var> {
    let aux = aux.ok_or(Error::MissingAuxiliary)?;
    let la = graph_loss(g, aux, target, kind)?;
    let lm = graph_loss(g, main, target, kind)?;
    let la = g.scale(la, 0.5);
    let lm = g.scale(lm, 0.5);
    g.add(la, lm)
}
