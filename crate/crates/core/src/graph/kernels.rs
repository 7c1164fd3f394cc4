//! Numeric kernels behind the graph ops. Everything here works on raw
//! row-major slices; shape validation happens in the graph layer.

use rayon::prelude::*;

use crate::tensor::{numel, strides, Tensor};

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `trans_a` the slice `a` holds a `k×m` matrix, with `trans_b` the slice
/// `b` holds an `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above bound every access dgemm makes
    // with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.ph;
        let wp = w + 2 * self.pw;
        if hp < self.kh || wp < self.kw || self.sh == 0 || self.sw == 0 {
            return None;
        }
        Some(((hp - self.kh) / self.sh + 1, (wp - self.kw) / self.sw + 1))
    }
}

/// Output columns `lo..hi` whose input column `ox * sw + kj - pw` lies in `0..w`.
fn valid_cols(w: usize, wo: usize, sw: usize, kj: usize, pw: usize) -> (usize, usize) {
    let lo = if kj >= pw { 0 } else { (pw - kj).div_ceil(sw) };
    let hi = if w + pw > kj { ((w - 1 + pw - kj) / sw + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, cols: &mut [f64]) {
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                let (lo, hi) = valid_cols(w, wo, g.sw, kj, g.pw);
                for oy in 0..ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if g.sw == 1 {
                        let start = lo + kj - g.pw;
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[(lo + ox) * g.sw + kj - g.pw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, dx: &mut [f64]) {
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                let (lo, hi) = valid_cols(w, wo, g.sw, kj, g.pw);
                for oy in 0..ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for ox in lo..hi {
                        dst[ox * g.sw + kj - g.pw] += src[ox];
                    }
                }
            }
        }
    }
}

/// x: (B, Cin, H, W), w: (Cout, Cin, kh, kw), bias: (Cout).
pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &ConvGeom) -> Tensor {
    let (bsz, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let cout = w.dim(0);
    let (ho, wo) = g.out_hw(h, wd).expect("validated geometry");
    let kdim = cin * g.kh * g.kw;
    let p = ho * wo;
    let mut out = vec![0.0; bsz * cout * p];
    out.par_chunks_mut(cout * p).enumerate().for_each(|(b, ob)| {
        let xb = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
        let mut cols = vec![0.0; kdim * p];
        im2col(xb, cin, h, wd, g, ho, wo, &mut cols);
        gemm(cout, kdim, p, w.data(), false, &cols, false, ob, 0.0);
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(p).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::new(vec![bsz, cout, ho, wo], out).expect("conv output shape")
}

pub(crate) struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &ConvGeom,
    dy: &Tensor,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let (bsz, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let cout = w.dim(0);
    let (ho, wo) = (dy.dim(2), dy.dim(3));
    let kdim = cin * g.kh * g.kw;
    let p = ho * wo;

    let per_batch: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..bsz)
        .into_par_iter()
        .map(|b| {
            let dyb = &dy.data()[b * cout * p..(b + 1) * cout * p];
            let dw = if need_dw {
                let xb = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
                let mut cols = vec![0.0; kdim * p];
                im2col(xb, cin, h, wd, g, ho, wo, &mut cols);
                let mut dwb = vec![0.0; cout * kdim];
                gemm(cout, p, kdim, dyb, false, &cols, true, &mut dwb, 0.0);
                Some(dwb)
            } else {
                None
            };
            let dx = if need_dx {
                let mut dcols = vec![0.0; kdim * p];
                gemm(kdim, cout, p, w.data(), true, dyb, false, &mut dcols, 0.0);
                let mut dxb = vec![0.0; cin * h * wd];
                col2im(&dcols, cin, h, wd, g, ho, wo, &mut dxb);
                Some(dxb)
            } else {
                None
            };
            (dx, dw)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut data = Vec::with_capacity(bsz * cin * h * wd);
        for (dxb, _) in &per_batch {
            data.extend_from_slice(dxb.as_ref().expect("dx computed"));
        }
        Tensor::new(x.shape().to_vec(), data).expect("dx shape")
    });
    let dw = need_dw.then(|| {
        // Summed in batch order so the result does not depend on scheduling.
        let mut acc = vec![0.0; cout * kdim];
        for (_, dwb) in &per_batch {
            for (a, v) in acc.iter_mut().zip(dwb.as_ref().expect("dw computed")) {
                *a += v;
            }
        }
        Tensor::new(w.shape().to_vec(), acc).expect("dw shape")
    });
    let db = need_db.then(|| {
        let mut acc = vec![0.0; cout];
        for b in 0..bsz {
            for (co, a) in acc.iter_mut().enumerate() {
                *a += dy.data()[(b * cout + co) * p..][..p].iter().sum::<f64>();
            }
        }
        Tensor::new(vec![cout], acc).expect("db shape")
    });
    ConvGrads { dx, dw, db }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed at rank `out.len()`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let own = strides(shape);
    (0..r)
        .map(|i| {
            if i + shape.len() < r {
                0
            } else {
                let j = i + shape.len() - r;
                if shape[j] == 1 && out[i] != 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Visits every element of `out_shape` in row-major order, passing the
/// linear offsets into two broadcast operands.
fn for_each_broadcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = out_shape.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[r - 1];
    let (ia, ib) = (sa[r - 1], sb[r - 1]);
    let outer = numel(&out_shape[..r - 1]);
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * inner;
        for k in 0..inner {
            f(base + k, oa + k * ia, ob + k * ib);
        }
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape.to_vec(), data).expect("same-shape binary");
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut data = vec![0.0; numel(out_shape)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(out_shape, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
    Tensor::new(out_shape.to_vec(), data).expect("broadcast output")
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
pub(crate) fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let st = broadcast_strides(shape, grad.shape());
    let zero = vec![0; grad.ndim()];
    let mut acc = vec![0.0; numel(shape)];
    let gd = grad.data();
    for_each_broadcast(grad.shape(), &st, &zero, |o, i, _| acc[i] += gd[o]);
    Tensor::new(shape.to_vec(), acc).expect("reduce_to output")
}

/// Per-channel batch normalization over (B, H, W) of a (B, C, H, W) tensor.
pub(crate) struct BatchNormForward {
    pub out: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn batch_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> BatchNormForward {
    let (bsz, c) = (x.dim(0), x.dim(1));
    let p: usize = x.shape()[2..].iter().product();
    let count = (bsz * p) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..bsz {
            s += xd[(b * c + ch) * p..][..p].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..bsz {
            v += xd[(b * c + ch) * p..][..p].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * p;
            let (m, is, gm, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + p {
                let h = (xd[i] - m) * is;
                xhat[i] = h;
                out[i] = gm * h + bt;
            }
        }
    }
    BatchNormForward {
        out: Tensor::new(x.shape().to_vec(), out).expect("bn out"),
        xhat: Tensor::new(x.shape().to_vec(), xhat).expect("bn xhat"),
        inv_std,
        mean,
        var,
    }
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn batch_norm_backward(xhat: &Tensor, inv_std: &[f64], gamma: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bsz, c) = (xhat.dim(0), xhat.dim(1));
    let p: usize = xhat.shape()[2..].iter().product();
    let count = (bsz * p) as f64;
    let (hd, gd) = (xhat.data(), dy.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * p;
            for i in base..base + p {
                dgamma[ch] += gd[i] * hd[i];
                dbeta[ch] += gd[i];
            }
        }
    }
    let mut dx = vec![0.0; hd.len()];
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * p;
            let gm = gamma.data()[ch];
            // dxhat = dy * gamma; sums over dxhat expressed through dbeta/dgamma.
            let sum_dxhat = dbeta[ch] * gm;
            let sum_dxhat_xhat = dgamma[ch] * gm;
            let k = inv_std[ch] / count;
            for i in base..base + p {
                dx[i] = k * (count * gd[i] * gm - sum_dxhat - hd[i] * sum_dxhat_xhat);
            }
        }
    }
    (
        Tensor::new(xhat.shape().to_vec(), dx).expect("bn dx"),
        Tensor::new(vec![c], dgamma).expect("bn dgamma"),
        Tensor::new(vec![c], dbeta).expect("bn dbeta"),
    )
}

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("softmax needs rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax shape")
}

pub(crate) fn softmax_last_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let n = *y.shape().last().expect("softmax rank");
    let mut dx = vec![0.0; y.numel()];
    for ((yr, gr), dr) in y.data().chunks(n).zip(dy.data().chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..n {
            dr[i] = yr[i] * (gr[i] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("softmax grad shape")
}

/// Source taps for one output coordinate of a half-pixel-centred bilinear resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            Tap { i0, i1, frac }
        })
        .collect()
}

/// Resizes every trailing (H, W) plane of `x` to (oh, ow).
pub(crate) fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let r = x.ndim();
    let (h, w) = (x.dim(r - 2), x.dim(r - 1));
    let planes = x.numel() / (h * w);
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(pl, o)| {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        for (oy, ty) in ty.iter().enumerate() {
            let r0 = &src[ty.i0 * w..(ty.i0 + 1) * w];
            let r1 = &src[ty.i1 * w..(ty.i1 + 1) * w];
            for (ox, tx) in tx.iter().enumerate() {
                let top = r0[tx.i0] * (1.0 - tx.frac) + r0[tx.i1] * tx.frac;
                let bot = r1[tx.i0] * (1.0 - tx.frac) + r1[tx.i1] * tx.frac;
                o[oy * ow + ox] = top * (1.0 - ty.frac) + bot * ty.frac;
            }
        }
    });
    let mut shape = x.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out).expect("resize shape")
}

pub(crate) fn resize_bilinear_backward(input_shape: &[usize], dy: &Tensor) -> Tensor {
    let r = input_shape.len();
    let (h, w) = (input_shape[r - 2], input_shape[r - 1]);
    let (oh, ow) = (dy.dim(r - 2), dy.dim(r - 1));
    let planes = numel(input_shape) / (h * w);
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(pl, d)| {
        let g = &dy.data()[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, ty) in ty.iter().enumerate() {
            for (ox, tx) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let top = v * (1.0 - ty.frac);
                let bot = v * ty.frac;
                d[ty.i0 * w + tx.i0] += top * (1.0 - tx.frac);
                d[ty.i0 * w + tx.i1] += top * tx.frac;
                d[ty.i1 * w + tx.i0] += bot * (1.0 - tx.frac);
                d[ty.i1 * w + tx.i1] += bot * tx.frac;
            }
        }
    });
    Tensor::new(input_shape.to_vec(), dx).expect("resize grad shape")
}
