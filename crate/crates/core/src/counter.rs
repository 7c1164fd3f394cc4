//! Weakly-supervised location-aware counter.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{ParamKind, ParamStore, Session};
use crate::tensor::Tensor;

pub const HEAD_PREFIX: &str = "counter.head";
pub const SIM_SCALE: &str = "counter.similarity_scale";

/// `X_c = Σ_p S(p) F̄(p, c)`: the similarity row vector times the
/// `hw × C` feature matrix, shape `(B, C)`.
pub fn pool_correlation(g: &mut Graph, features: Var, similarity: Var) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    let ss = g.shape(similarity).to_vec();
    if fs.len() != 4 || ss != [fs[0], fs[2], fs[3]] {
        return Err(shape_err("pool_correlation", format!("features {fs:?} vs similarity {ss:?}")));
    }
    let (b, c, p) = (fs[0], fs[1], fs[2] * fs[3]);
    let srow = g.reshape(similarity, &[b, 1, p])?;
    let flat = g.reshape(features, &[b, c, p])?;
    let x = g.matmul_nt(srow, flat)?;
    g.reshape(x, &[b, c])
}

/// Dense layers `input → widths[0] → … → 1` with ReLU between layers.
pub fn register_head<R: Rng + ?Sized>(store: &mut ParamStore, input: usize, widths: &[usize], rng: &mut R) {
    let mut inp = input;
    for (i, &w) in widths.iter().enumerate() {
        nn::register_linear(store, &format!("{HEAD_PREFIX}.fc{i}"), w, inp, rng);
        inp = w;
    }
}

/// `N̂`: one unconstrained value per batch element, shape `(B,)`.
pub fn regress_count(sess: &mut Session<'_>, embedding: Var, layers: usize) -> Result<Var> {
    let b = sess.graph.shape(embedding)[0];
    let mut x = embedding;
    for i in 0..layers {
        x = nn::linear(sess, &format!("{HEAD_PREFIX}.fc{i}"), x)?;
        if i + 1 < layers {
            x = sess.graph.relu(x);
        }
    }
    sess.graph.reshape(x, &[b])
}

pub fn register_similarity_scale(store: &mut ParamStore) {
    store.insert(format!("{SIM_SCALE}.weight"), Tensor::ones(&[1]), ParamKind::Trainable);
    store.insert(format!("{SIM_SCALE}.bias"), Tensor::zeros(&[1]), ParamKind::Trainable);
}

/// Count path without the location-aware counter: `a · mean(S) + b`.
pub fn similarity_count(sess: &mut Session<'_>, similarity: Var) -> Result<Var> {
    let ss = sess.graph.shape(similarity).to_vec();
    if ss.len() != 3 {
        return Err(shape_err("similarity_count", format!("similarity {ss:?}")));
    }
    let a = sess.param(&format!("{SIM_SCALE}.weight"))?;
    let bias = sess.param(&format!("{SIM_SCALE}.bias"))?;
    let g = &mut sess.graph;
    let flat = g.reshape(similarity, &[ss[0], ss[1] * ss[2]])?;
    let mean = g.mean_axis(flat, 1)?;
    let scaled = g.mul(mean, a)?;
    g.add(scaled, bias)
}
