//! Forward and backward kernels. Backbone tensors are `[C, B, H, W]`,
//! fully connected tensors `[B, N]`.

use super::tensor::{matmul, Scalar};
use super::ConvGeom;

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies
/// inside `[0, in_w)`.
fn valid_cols(g: &ConvGeom, kj: usize) -> std::ops::Range<usize> {
    let off = kj as isize - g.pad as isize;
    let s = g.stride as isize;
    // smallest ox with ox*s + off >= 0; one past the largest with ox*s + off < in_w
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = if (g.in_w as isize) > off { (g.in_w as isize - off + s - 1) / s } else { 0 };
    let hi = (hi as usize).min(g.out_w);
    (lo as usize).min(hi)..hi
}

/// Unfolds receptive fields into a `[C k k, B OH OW]` matrix.
pub(crate) fn im2col<T: Copy + Default>(x: &[T], g: &ConvGeom, b: usize) -> Vec<T> {
    let n = b * g.out_h * g.out_w;
    let mut col = vec![T::default(); g.rows() * n];
    let plane = g.in_h * g.in_w;
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let row = &mut col[r * n..(r + 1) * n];
                for bi in 0..b {
                    let xb = &x[(c * b + bi) * plane..(c * b + bi + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src = &xb[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        let dst = &mut row[(bi * g.out_h + oy) * g.out_w..(bi * g.out_h + oy + 1) * g.out_w];
                        let cols = valid_cols(g, kj);
                        if cols.is_empty() {
                            continue;
                        }
                        let ix0 = cols.start * g.stride + kj - g.pad;
                        let dst = &mut dst[cols];
                        if g.stride == 1 {
                            dst.copy_from_slice(&src[ix0..ix0 + dst.len()]);
                        } else {
                            for (d, &v) in dst.iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<S: Scalar>(col: &[S], g: &ConvGeom, b: usize) -> Vec<S> {
    let n = b * g.out_h * g.out_w;
    let plane = g.in_h * g.in_w;
    let mut x = vec![S::zero(); g.in_c * b * plane];
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let row = &col[r * n..(r + 1) * n];
                for bi in 0..b {
                    let xb = &mut x[(c * b + bi) * plane..(c * b + bi + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src = &row[(bi * g.out_h + oy) * g.out_w..(bi * g.out_h + oy + 1) * g.out_w];
                        let dst = &mut xb[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        let cols = valid_cols(g, kj);
                        if cols.is_empty() {
                            continue;
                        }
                        let ix0 = cols.start * g.stride + kj - g.pad;
                        for (d, &v) in dst[ix0..].iter_mut().step_by(g.stride).zip(&src[cols]) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation. Returns the output and the unfolded input.
pub(crate) fn conv_forward<S: Scalar>(x: &[S], w: &[S], g: &ConvGeom, b: usize) -> (Vec<S>, Vec<S>) {
    let col = im2col(x, g, b);
    let n = b * g.out_h * g.out_w;
    let mut y = vec![S::zero(); g.out_c * n];
    matmul(g.out_c, g.rows(), n, w, false, &col, false, &mut y, false);
    (y, col)
}

/// Returns `(dW, dX)`; `dX` only when requested.
pub(crate) fn conv_backward<S: Scalar>(
    dy: &[S],
    col: &[S],
    w: &[S],
    g: &ConvGeom,
    b: usize,
    need_dx: bool,
) -> (Vec<S>, Option<Vec<S>>) {
    let n = b * g.out_h * g.out_w;
    let mut dw = vec![S::zero(); g.out_c * g.rows()];
    matmul(g.out_c, n, g.rows(), dy, false, col, true, &mut dw, false);
    let dx = need_dx.then(|| {
        let mut dcol = vec![S::zero(); g.rows() * n];
        matmul(g.rows(), g.out_c, n, w, true, dy, false, &mut dcol, false);
        col2im(&dcol, g, b)
    });
    (dw, dx)
}

pub(crate) struct BnCache<S> {
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
    /// Batch statistics (biased variance) when computed in training mode.
    pub batch_stats: Option<(Vec<S>, Vec<S>)>,
}

/// Per-channel normalization over `[C, N]`. With `running` set, those
/// statistics are used instead of the batch's.
/// Eight-accumulator dot product so the reduction vectorizes.
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    for (x, y) in ra.iter().zip(rb) {
        acc[0] = acc[0] + *x * *y;
    }
    acc.iter().copied().sum()
}

/// Eight-accumulator sum.
fn sum<S: Scalar>(a: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let c = a.chunks_exact(8);
    let r = c.remainder();
    for x in c {
        for l in 0..8 {
            acc[l] = acc[l] + x[l];
        }
    }
    for x in r {
        acc[0] = acc[0] + *x;
    }
    acc.iter().copied().sum()
}

pub(crate) fn bn_forward<S: Scalar>(
    x: &[S],
    c: usize,
    gamma: &[S],
    beta: &[S],
    running: Option<(&[S], &[S])>,
    eps: f64,
) -> (Vec<S>, BnCache<S>) {
    let n = x.len() / c;
    let mut y = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_std = vec![S::zero(); c];
    let mut means = vec![S::zero(); c];
    let mut vars = vec![S::zero(); c];
    let nf = S::lit(n as f64);
    for ch in 0..c {
        let xs = &x[ch * n..(ch + 1) * n];
        let (mean, var) = match running {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let mean = sum(xs) / nf;
                let centered: Vec<S> = xs.iter().map(|&v| v - mean).collect();
                (mean, dot(&centered, &centered) / nf)
            }
        };
        means[ch] = mean;
        vars[ch] = var;
        let is = S::one() / (var + S::lit(eps)).sqrt();
        inv_std[ch] = is;
        let (g, b) = (gamma[ch], beta[ch]);
        let hs = &mut xhat[ch * n..(ch + 1) * n];
        let ys = &mut y[ch * n..(ch + 1) * n];
        for ((h, o), &v) in hs.iter_mut().zip(ys.iter_mut()).zip(xs) {
            *h = (v - mean) * is;
            *o = g * *h + b;
        }
    }
    let batch_stats = running.is_none().then_some((means, vars));
    (y, BnCache { xhat, inv_std, batch_stats })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<S: Scalar>(dy: &[S], cache: &BnCache<S>, gamma: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
    let c = gamma.len();
    let n = dy.len() / c;
    let nf = S::lit(n as f64);
    let mut dx = vec![S::zero(); dy.len()];
    let mut dg = vec![S::zero(); c];
    let mut db = vec![S::zero(); c];
    for ch in 0..c {
        let d = &dy[ch * n..(ch + 1) * n];
        let h = &cache.xhat[ch * n..(ch + 1) * n];
        let sum_d = sum(d);
        let sum_dh = dot(d, h);
        dg[ch] = sum_dh;
        db[ch] = sum_d;
        let scale = gamma[ch] * cache.inv_std[ch];
        let out = &mut dx[ch * n..(ch + 1) * n];
        if cache.batch_stats.is_some() {
            let (md, mh) = (sum_d / nf, sum_dh / nf);
            for ((o, &di), &hi) in out.iter_mut().zip(d).zip(h) {
                *o = scale * (di - md - hi * mh);
            }
        } else {
            for (o, &di) in out.iter_mut().zip(d) {
                *o = scale * di;
            }
        }
    }
    (dx, dg, db)
}

pub(crate) fn relu_inplace<S: Scalar>(x: &mut [S]) {
    for v in x.iter_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// Zeroes gradients where the forward output was not positive.
pub(crate) fn relu_backward_inplace<S: Scalar>(dy: &mut [S], y: &[S]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v <= S::zero() {
            *d = S::zero();
        }
    }
}

/// `y = x W^T + b` for `x: [B, in]`, `W: [out, in]`.
pub(crate) fn fc_forward<S: Scalar>(x: &[S], w: &[S], bias: &[S], b: usize, inp: usize, out: usize) -> Vec<S> {
    let mut y = vec![S::zero(); b * out];
    matmul(b, inp, out, x, false, w, true, &mut y, false);
    for row in y.chunks_mut(out) {
        for (v, &bb) in row.iter_mut().zip(bias) {
            *v = *v + bb;
        }
    }
    y
}

/// Returns `(dx, dW, db)`.
pub(crate) fn fc_backward<S: Scalar>(
    dy: &[S],
    x: &[S],
    w: &[S],
    b: usize,
    inp: usize,
    out: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut dw = vec![S::zero(); out * inp];
    matmul(out, b, inp, dy, true, x, false, &mut dw, false);
    let mut dx = vec![S::zero(); b * inp];
    matmul(b, out, inp, dy, false, w, false, &mut dx, false);
    let mut db = vec![S::zero(); out];
    for row in dy.chunks(out) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    (dx, dw, db)
}

/// `[C, B, HW] -> [B, C HW]`.
pub(crate) fn flatten<S: Scalar>(x: &[S], c: usize, b: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for ch in 0..c {
        for bi in 0..b {
            let src = &x[(ch * b + bi) * hw..(ch * b + bi + 1) * hw];
            out[bi * c * hw + ch * hw..bi * c * hw + (ch + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`flatten`].
pub(crate) fn unflatten<S: Scalar>(x: &[S], c: usize, b: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for ch in 0..c {
        for bi in 0..b {
            out[(ch * b + bi) * hw..(ch * b + bi + 1) * hw]
                .copy_from_slice(&x[bi * c * hw + ch * hw..bi * c * hw + (ch + 1) * hw]);
        }
    }
    out
}

/// Row-wise `[a | b]`.
pub(crate) fn concat_rows<S: Scalar>(a: &[S], wa: usize, b: &[S], wb: usize, rows: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(rows * (wa + wb));
    for r in 0..rows {
        out.extend_from_slice(&a[r * wa..(r + 1) * wa]);
        out.extend_from_slice(&b[r * wb..(r + 1) * wb]);
    }
    out
}

/// Inverse of [`concat_rows`].
pub(crate) fn split_rows<S: Scalar>(x: &[S], wa: usize, wb: usize, rows: usize) -> (Vec<S>, Vec<S>) {
    let mut a = Vec::with_capacity(rows * wa);
    let mut b = Vec::with_capacity(rows * wb);
    for row in x.chunks(wa + wb).take(rows) {
        a.extend_from_slice(&row[..wa]);
        b.extend_from_slice(&row[wa..]);
    }
    (a, b)
}
