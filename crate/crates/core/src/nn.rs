//! Layer helpers over named parameters. Each layer registers its tensors
//! under a prefix (`<prefix>.weight`, `<prefix>.bias`, ...) and looks them
//! up again through a [`Session`] at forward time.

use rand::Rng;

use crate::error::Result;
use crate::graph::Var;
use crate::params::{init, Mode, ParamKind, ParamStore, Session};
use crate::tensor::Tensor;

pub fn register_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cout: usize,
    cin: usize,
    kernel: (usize, usize),
    bias: bool,
    rng: &mut R,
) {
    let fan_in = cin * kernel.0 * kernel.1;
    store.insert(
        format!("{prefix}.weight"),
        init::kaiming_normal(&[cout, cin, kernel.0, kernel.1], fan_in, rng),
        ParamKind::Trainable,
    );
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]), ParamKind::Trainable);
    }
}

pub fn register_linear<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, out: usize, inp: usize, rng: &mut R) {
    store.insert(
        format!("{prefix}.weight"),
        init::fan_in_uniform(&[out, inp], inp, rng),
        ParamKind::Trainable,
    );
    store.insert(
        format!("{prefix}.bias"),
        init::fan_in_uniform(&[out], inp, rng),
        ParamKind::Trainable,
    );
}

pub fn register_batch_norm(store: &mut ParamStore, prefix: &str, channels: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]), ParamKind::Trainable);
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable);
    store.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer);
    store.insert(format!("{prefix}.running_var"), Tensor::ones(&[channels]), ParamKind::Buffer);
}

/// Convolution with a `(sh, sw)` stride and `(ph, pw)` zero padding. The
/// bias is used when one was registered.
pub fn conv(sess: &mut Session<'_>, prefix: &str, x: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
    let w = sess.param(&format!("{prefix}.weight"))?;
    let bias_name = format!("{prefix}.bias");
    let b = if sess.store().contains(&bias_name) {
        Some(sess.param(&bias_name)?)
    } else {
        None
    };
    sess.graph.conv2d(x, w, b, stride, pad)
}

/// Same-padded stride-1 convolution; kernel sides must be odd.
pub fn conv_same(sess: &mut Session<'_>, prefix: &str, x: Var) -> Result<Var> {
    let kshape = sess.store().tensor(&format!("{prefix}.weight"))?.shape().to_vec();
    conv(sess, prefix, x, (1, 1), (kshape[2] / 2, kshape[3] / 2))
}

pub fn linear(sess: &mut Session<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = sess.param(&format!("{prefix}.weight"))?;
    let b = sess.param(&format!("{prefix}.bias"))?;
    sess.graph.linear(x, w, Some(b))
}

/// Batch norm: batch statistics in [`Mode::Train`], running statistics in [`Mode::Eval`].
pub fn batch_norm(sess: &mut Session<'_>, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gamma = sess.param(&format!("{prefix}.gamma"))?;
    let beta = sess.param(&format!("{prefix}.beta"))?;
    match sess.mode() {
        Mode::Train => {
            let (y, stats) = sess.graph.batch_norm(x, gamma, beta, eps)?;
            sess.record_batch_stats(prefix, stats);
            Ok(y)
        }
        Mode::Eval => {
            let c = gamma_len(sess, gamma);
            let rm = sess.buffer(&format!("{prefix}.running_mean"))?.reshape(&[1, c, 1, 1])?;
            let inv_std = sess
                .buffer(&format!("{prefix}.running_var"))?
                .map(|v| 1.0 / (v + eps).sqrt())
                .reshape(&[1, c, 1, 1])?;
            let g = &mut sess.graph;
            let rm = g.constant(rm);
            let inv_std = g.constant(inv_std);
            let gamma = g.reshape(gamma, &[1, c, 1, 1])?;
            let beta = g.reshape(beta, &[1, c, 1, 1])?;
            let centred = g.sub(x, rm)?;
            let normed = g.mul(centred, inv_std)?;
            let scaled = g.mul(normed, gamma)?;
            g.add(scaled, beta)
        }
    }
}

fn gamma_len(sess: &Session<'_>, gamma: Var) -> usize {
    sess.graph.shape(gamma)[0]
}
