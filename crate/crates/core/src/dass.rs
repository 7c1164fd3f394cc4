//! Dual-attention self-similarity learning.
//!
//! The main-branch features are probed by three directional convolutions
//! (horizontal `1×k`, vertical `k×1`, channel `1×1`). The exemplar token
//! decides how the three responses are mixed (`α, β, γ`), while the
//! features' channel Gram matrix decides how each exemplar token is
//! re-weighted (`e_1..e_T`). The similarity map is the mean dot product
//! between every pixel feature and the recalibrated tokens.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::exemplar_sim::flat_tokens;
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

pub const HORIZONTAL: &str = "dass.aniso.horizontal";
pub const VERTICAL: &str = "dass.aniso.vertical";
pub const BASIS: &str = "dass.aniso.basis";
pub const INTEGRATE: &str = "dass.integrate";
pub const DIRECTION_HIDDEN: &str = "dass.direction.hidden";
pub const DIRECTION_OUT: &str = "dass.direction.out";
pub const TOKEN_HEAD: &str = "dass.token_weights";

/// Directional responses, each the same shape as the source features.
#[derive(Clone, Copy, Debug)]
pub struct AnisotropicFeatures {
    pub horizontal: Var,
    pub vertical: Var,
    pub basis: Var,
}

/// Registers the parameters the flags in `config` call for.
pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) {
    let c = config.channels;
    let flags = config.flags;
    if flags.recalibration {
        nn::register_conv(store, HORIZONTAL, c, c, (1, config.aniso_kernel_h), true, rng);
        nn::register_conv(store, VERTICAL, c, c, (config.aniso_kernel_v, 1), true, rng);
        nn::register_conv(store, BASIS, c, c, (1, 1), true, rng);
        if flags.condenser {
            nn::register_linear(store, DIRECTION_HIDDEN, config.direction_hidden, config.token_count() * c, rng);
            nn::register_linear(store, DIRECTION_OUT, 3, config.direction_hidden, rng);
        }
    }
    nn::register_conv(store, INTEGRATE, c, c, (3, 3), true, rng);
    if flags.condenser {
        nn::register_linear(store, TOKEN_HEAD, config.token_count(), c, rng);
    }
}

/// `H(F), V(F), B(F)` with same padding.
pub fn anisotropic_encode(sess: &mut Session<'_>, features: Var) -> Result<AnisotropicFeatures> {
    Ok(AnisotropicFeatures {
        horizontal: nn::conv_same(sess, HORIZONTAL, features)?,
        vertical: nn::conv_same(sess, VERTICAL, features)?,
        basis: nn::conv_same(sess, BASIS, features)?,
    })
}

/// `(α, β, γ)` per batch element: a two-layer MLP over the flat token with a
/// softmax output, shape `(B, 3)`.
pub fn direction_weights(sess: &mut Session<'_>, tokens: Var) -> Result<Var> {
    let flat = flat_tokens(&mut sess.graph, tokens)?;
    let h = nn::linear(sess, DIRECTION_HIDDEN, flat)?;
    let h = sess.graph.relu(h);
    let logits = nn::linear(sess, DIRECTION_OUT, h)?;
    Ok(sess.graph.softmax(logits))
}

/// `(1/3, 1/3, 1/3)` for every batch element.
pub fn uniform_direction_weights(g: &mut Graph, batch: usize) -> Var {
    g.constant(Tensor::full(&[batch, 3], 1.0 / 3.0))
}

/// `F̄ = W ∗ (F + αH + βV + γB)`. Without anisotropic features the sum
/// reduces to `F` and the output to `W ∗ F`.
pub fn integrate_features(
    sess: &mut Session<'_>,
    features: Var,
    aniso: Option<&AnisotropicFeatures>,
    weights: Option<Var>,
) -> Result<Var> {
    let fs = sess.graph.shape(features).to_vec();
    if fs.len() != 4 {
        return Err(shape_err("integrate_features", format!("features {fs:?}")));
    }
    let mut acc = features;
    if let Some(a) = aniso {
        let w = weights.ok_or_else(|| shape_err("integrate_features", "direction weights missing"))?;
        if sess.graph.shape(w) != [fs[0], 3] {
            return Err(shape_err(
                "integrate_features",
                format!("direction weights {:?} for batch {}", sess.graph.shape(w), fs[0]),
            ));
        }
        for (k, term) in [a.horizontal, a.vertical, a.basis].into_iter().enumerate() {
            if sess.graph.shape(term) != fs.as_slice() {
                return Err(shape_err(
                    "integrate_features",
                    format!("anisotropic term {:?} vs features {fs:?}", sess.graph.shape(term)),
                ));
            }
            let g = &mut sess.graph;
            let coef = g.select(w, 1, k)?;
            let coef = g.reshape(coef, &[fs[0], 1, 1, 1])?;
            let scaled = g.mul(term, coef)?;
            acc = g.add(acc, scaled)?;
        }
    }
    nn::conv_same(sess, INTEGRATE, acc)
}

/// `F Fᵀ` per batch element over the flattened spatial axis: `(B, C, C)`.
pub fn gram_matrix(g: &mut Graph, features: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    if s.len() != 4 {
        return Err(shape_err("gram_matrix", format!("features {s:?}")));
    }
    let flat = g.reshape(features, &[s[0], s[1], s[2] * s[3]])?;
    g.matmul_nt(flat, flat)
}

/// `(e_1..e_T)`: row-mean of the Gram matrix, a linear map `C → T`, softmax.
pub fn token_weights(sess: &mut Session<'_>, gram: Var) -> Result<Var> {
    let pooled = sess.graph.mean_axis(gram, 2)?;
    let logits = nn::linear(sess, TOKEN_HEAD, pooled)?;
    Ok(sess.graph.softmax(logits))
}

/// `1/T` for every token.
pub fn uniform_token_weights(g: &mut Graph, batch: usize, tokens: usize) -> Var {
    g.constant(Tensor::full(&[batch, tokens], 1.0 / tokens as f64))
}

/// `T̄ = [e_1 T_1, …, e_T T_T] + T`.
pub fn recalibrate_token(g: &mut Graph, tokens: Var, weights: Var) -> Result<Var> {
    let ts = g.shape(tokens).to_vec();
    if ts.len() != 3 || g.shape(weights) != [ts[0], ts[1]] {
        return Err(shape_err(
            "recalibrate_token",
            format!("tokens {ts:?} vs weights {:?}", g.shape(weights)),
        ));
    }
    let w = g.reshape(weights, &[ts[0], ts[1], 1])?;
    let scaled = g.mul(tokens, w)?;
    g.add(scaled, tokens)
}

/// `S(p) = (1/T) Σ_j ⟨F̄(p), T̄_j⟩`, shape `(B, h, w)`.
pub fn similarity_map(g: &mut Graph, features: Var, tokens: Var) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    let ts = g.shape(tokens).to_vec();
    if fs.len() != 4 || ts.len() != 3 || fs[0] != ts[0] {
        return Err(shape_err("similarity_map", format!("features {fs:?}, tokens {ts:?}")));
    }
    if fs[1] != ts[2] {
        return Err(Error::ChannelMismatch {
            features: fs[1],
            tokens: ts[2],
        });
    }
    let flat = g.reshape(features, &[fs[0], fs[1], fs[2] * fs[3]])?;
    let per_token = g.matmul(tokens, flat)?;
    let mean = g.mean_axis(per_token, 1)?;
    g.reshape(mean, &[fs[0], fs[2], fs[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Mode, ParamKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::tiny()
    }

    fn store_for(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        register(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    #[test]
    fn aniso_preserves_shape() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, 1);
        let mut s = Session::frozen(&store, Mode::Eval);
        let x = s.graph.constant(rand_t(&[1, 8, 6, 6], 2));
        let a = anisotropic_encode(&mut s, x).unwrap();
        for v in [a.horizontal, a.vertical, a.basis] {
            assert_eq!(s.graph.shape(v), &[1, 8, 6, 6]);
        }
    }

    #[test]
    fn zero_sum_horizontal_kernel_kills_row_constant_input() {
        let c = 2;
        let mut store = ParamStore::new();
        let mut w = Tensor::zeros(&[c, c, 1, 3]);
        for o in 0..c {
            for i in 0..c {
                w.set(&[o, i, 0, 0], -1.0);
                w.set(&[o, i, 0, 1], 2.0);
                w.set(&[o, i, 0, 2], -1.0);
            }
        }
        store.insert(format!("{HORIZONTAL}.weight"), w, ParamKind::Trainable);
        store.insert(format!("{HORIZONTAL}.bias"), Tensor::zeros(&[c]), ParamKind::Trainable);
        let mut s = Session::frozen(&store, Mode::Eval);
        // Constant along each row; interior columns see a full window.
        let x = s.graph.constant(Tensor::from_fn(&[1, c, 5, 6], |i| i[2] as f64 * 0.7 + i[1] as f64));
        let y = nn::conv_same(&mut s, HORIZONTAL, x).unwrap();
        let out = s.graph.value(y);
        for ch in 0..c {
            for r in 0..5 {
                for col in 1..5 {
                    assert!(out.at(&[0, ch, r, col]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_mlp_gives_uniform_direction_weights() {
        let cfg = tiny_cfg();
        let mut store = store_for(&cfg, 3);
        for name in [DIRECTION_OUT] {
            for suffix in ["weight", "bias"] {
                let t = store.get_mut(&format!("{name}.{suffix}")).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut s = Session::frozen(&store, Mode::Eval);
        let tok = s.graph.constant(rand_t(&[2, cfg.token_count(), 8], 4));
        let w = direction_weights(&mut s, tok).unwrap();
        for &v in s.graph.value(w).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_token_head_gives_uniform_token_weights() {
        let cfg = tiny_cfg();
        let mut store = store_for(&cfg, 5);
        for suffix in ["weight", "bias"] {
            let t = store.get_mut(&format!("{TOKEN_HEAD}.{suffix}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut s = Session::frozen(&store, Mode::Eval);
        let f = s.graph.constant(rand_t(&[1, 8, 3, 5], 6));
        let gm = gram_matrix(&mut s.graph, f).unwrap();
        let e = token_weights(&mut s, gm).unwrap();
        let t = cfg.token_count() as f64;
        assert!(s.graph.value(e).data().iter().all(|&v| (v - 1.0 / t).abs() < 1e-15));
    }

    #[test]
    fn cancellation_with_identity_integration_filter() {
        let c = 2;
        let mut store = ParamStore::new();
        let mut w = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            w.set(&[i, i, 1, 1], 1.0);
        }
        store.insert(format!("{INTEGRATE}.weight"), w, ParamKind::Trainable);
        store.insert(format!("{INTEGRATE}.bias"), Tensor::zeros(&[c]), ParamKind::Trainable);
        let f = rand_t(&[1, c, 4, 4], 7);
        let mut s = Session::frozen(&store, Mode::Eval);
        let fv = s.graph.constant(f.clone());
        let neg = s.graph.constant(f.scale(-1.0));
        let zero = s.graph.constant(Tensor::zeros(&[1, c, 4, 4]));
        let aniso = AnisotropicFeatures {
            horizontal: neg,
            vertical: zero,
            basis: zero,
        };
        let dw = s.graph.constant(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap());
        let out = integrate_features(&mut s, fv, Some(&aniso), Some(dw)).unwrap();
        assert!(s.graph.value(out).data().iter().all(|v| v.abs() < 1e-12));

        // Zero anisotropic terms reduce to W ∗ F (identity W here).
        let aniso = AnisotropicFeatures {
            horizontal: zero,
            vertical: zero,
            basis: zero,
        };
        let dw = uniform_direction_weights(&mut s.graph, 1);
        let out = integrate_features(&mut s, fv, Some(&aniso), Some(dw)).unwrap();
        assert!(s.graph.value(out).max_abs_diff(&f) < 1e-12);
    }

    #[test]
    fn gram_of_single_pixel_is_outer_product() {
        let v = [1.0, -2.0, 0.5];
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(vec![1, 3, 1, 1], v.to_vec()).unwrap());
        let gm = gram_matrix(&mut g, f).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.value(gm).at(&[0, i, j]), v[i] * v[j]);
            }
        }
    }

    #[test]
    fn gram_of_orthogonal_rows_is_diagonal() {
        let mut g = Graph::new();
        let data = vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0];
        let f = g.constant(Tensor::new(vec![1, 3, 2, 2], data).unwrap());
        let gm = gram_matrix(&mut g, f).unwrap();
        let out = g.value(gm);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(out.at(&[0, i, j]), 0.0);
                }
            }
        }
        assert_eq!(out.at(&[0, 2, 2]), 9.0);
    }

    #[test]
    fn recalibration_arithmetic() {
        let toks = rand_t(&[1, 4, 3], 8);
        let mut g = Graph::new();
        let t = g.constant(toks.clone());
        let w = g.constant(Tensor::full(&[1, 4], 0.25));
        let r = recalibrate_token(&mut g, t, w).unwrap();
        assert!(g.value(r).max_abs_diff(&toks.scale(1.25)) < 1e-15);

        let mut onehot = Tensor::zeros(&[1, 4]);
        onehot.set(&[0, 2], 1.0);
        let w = g.constant(onehot);
        let r = recalibrate_token(&mut g, t, w).unwrap();
        let out = g.value(r);
        for k in 0..4 {
            let f = if k == 2 { 2.0 } else { 1.0 };
            for c in 0..3 {
                assert_eq!(out.at(&[0, k, c]), toks.at(&[0, k, c]) * f);
            }
        }
    }

    #[test]
    fn similarity_of_ones() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        let t = g.constant(Tensor::ones(&[1, 16, 2]));
        let s = similarity_map(&mut g, f, t).unwrap();
        assert_eq!(g.shape(s), &[1, 3, 3]);
        assert!(g.value(s).data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn similarity_orthogonal_tokens_vanish() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| if i[1] == 0 { 1.5 } else { 0.0 }));
        let t = g.constant(Tensor::from_fn(&[1, 4, 2], |i| if i[2] == 1 { 3.0 } else { 0.0 }));
        let s = similarity_map(&mut g, f, t).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn similarity_channel_mismatch() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        let t = g.constant(Tensor::ones(&[1, 16, 3]));
        assert!(matches!(
            similarity_map(&mut g, f, t),
            Err(Error::ChannelMismatch { features: 2, tokens: 3 })
        ));
    }

    #[test]
    fn integrate_rejects_mismatched_terms() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, 9);
        let mut s = Session::frozen(&store, Mode::Eval);
        let f = s.graph.constant(Tensor::ones(&[1, 8, 4, 4]));
        let other = s.graph.constant(Tensor::ones(&[1, 8, 3, 4]));
        let aniso = AnisotropicFeatures {
            horizontal: other,
            vertical: f,
            basis: f,
        };
        let dw = uniform_direction_weights(&mut s.graph, 1);
        assert!(integrate_features(&mut s, f, Some(&aniso), Some(dw)).is_err());
    }
}
