//! Pseudo exemplar simulator.
//!
//! The exemplar feature grid is unfolded into every `K×K` window, the
//! windows are averaged into one pseudo exemplar patch, and the patch is cut
//! into `(K/s)²` non-overlapping `s×s` sub-patches which a shared linear map
//! projects to `C`-dimensional tokens.
//!
//! Orderings are fixed and row-major throughout:
//! * windows: by top-left corner `(y, x)`, `x` fastest;
//! * sub-patches (tokens): by `(ty, tx)`, `tx` fastest;
//! * a flattened sub-patch: `(c, dy, dx)`, `dx` fastest.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{ParamStore, Session};

fn grid_dims(g: &Graph, grid: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = g.shape(grid);
    if s.len() != 4 {
        return Err(shape_err(op, format!("expected (B, C, H, W), got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Number of `kernel`-sized windows along an axis of length `len`.
pub fn window_count(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

/// `U(F_e)`: all `kernel × kernel` windows at the given stride, shaped
/// `(B, n, C, K, K)`.
pub fn unfold_patches(g: &mut Graph, grid: Var, kernel: usize, stride: usize) -> Result<Var> {
    let (b, c, h, w) = grid_dims(g, grid, "unfold")?;
    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
        return Err(Error::Geometry(format!(
            "unfold kernel {kernel} with stride {stride} does not fit a {h}x{w} grid"
        )));
    }
    let (ny, nx) = (window_count(h, kernel, stride), window_count(w, kernel, stride));
    let n = ny * nx;
    let mut index = Vec::with_capacity(b * n * c * kernel * kernel);
    for bi in 0..b {
        for py in 0..ny {
            for px in 0..nx {
                for ci in 0..c {
                    let plane = (bi * c + ci) * h * w;
                    for i in 0..kernel {
                        let row = plane + (py * stride + i) * w + px * stride;
                        index.extend(row..row + kernel);
                    }
                }
            }
        }
    }
    g.gather(grid, index, &[b, n, c, kernel, kernel])
}

/// `P_e`: uniform mean over the window axis of a `(B, n, C, K, K)` patch set.
pub fn average_patches(g: &mut Graph, patches: Var) -> Result<Var> {
    let s = g.shape(patches);
    if s.len() != 5 || s[1] == 0 {
        return Err(shape_err("average_patches", format!("expected (B, n>=1, C, K, K), got {s:?}")));
    }
    g.mean_axis(patches, 1)
}

/// Cuts a `(B, C, K, K)` patch into `(K/s)²` sub-patches, each flattened to
/// `C·s²` values: output `(B, (K/s)², C·s²)`.
pub fn split_sub_patches(g: &mut Graph, patch: Var, sub: usize) -> Result<Var> {
    let (b, c, kh, kw) = grid_dims(g, patch, "split_sub_patches")?;
    if sub == 0 || kh != kw || kh % sub != 0 {
        return Err(Error::Geometry(format!(
            "a {kh}x{kw} patch cannot be split into {sub}x{sub} sub-patches"
        )));
    }
    let side = kh / sub;
    let tokens = side * side;
    let mut index = Vec::with_capacity(b * c * kh * kw);
    for bi in 0..b {
        for ty in 0..side {
            for tx in 0..side {
                for ci in 0..c {
                    for dy in 0..sub {
                        let row = ((bi * c + ci) * kh + ty * sub + dy) * kw + tx * sub;
                        index.extend(row..row + sub);
                    }
                }
            }
        }
    }
    g.gather(patch, index, &[b, tokens, c * sub * sub])
}

pub const TOKENIZER_PREFIX: &str = "exemplar_sim.proj";

/// Shared `C·s² → C` projection.
pub fn register_tokenizer<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, sub: usize, rng: &mut R) {
    nn::register_linear(store, TOKENIZER_PREFIX, channels, channels * sub * sub, rng);
}

/// `T_e`: `(B, (K/s)², C)` exemplar tokens from a `(B, C, K, K)` patch.
pub fn tokenize_exemplar(sess: &mut Session<'_>, prefix: &str, patch: Var, sub: usize) -> Result<Var> {
    let k = sess.graph.shape(patch).get(2).copied().unwrap_or(0);
    if k % 2 != 0 {
        return Err(Error::Geometry(format!("exemplar patch side {k} must be even")));
    }
    let flat = split_sub_patches(&mut sess.graph, patch, sub)?;
    nn::linear(sess, prefix, flat)
}

/// Full simulator: grid → windows → mean patch → tokens.
pub fn simulate(sess: &mut Session<'_>, grid: Var, kernel: usize, stride: usize, sub: usize) -> Result<Var> {
    let patches = unfold_patches(&mut sess.graph, grid, kernel, stride)?;
    let patch = average_patches(&mut sess.graph, patches)?;
    tokenize_exemplar(sess, TOKENIZER_PREFIX, patch, sub)
}

/// Flat `(B, T·C)` view of `(B, T, C)` tokens (tokens concatenated in order).
pub fn flat_tokens(g: &mut Graph, tokens: Var) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(shape_err("flat_tokens", format!("expected (B, T, C), got {s:?}")));
    }
    g.reshape(tokens, &[s[0], s[1] * s[2]])
}
