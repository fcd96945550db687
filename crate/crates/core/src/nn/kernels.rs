//! Per-layer forward and backward kernels.
//!
//! Batch-parallel work is split into fixed-size sample groups and partial
//! weight gradients are summed in group order, so results are bitwise
//! identical for any thread count.

use rayon::prelude::*;

use super::tensor::{matmul, Scalar, Tensor};

const GROUP: usize = 8;

fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Output positions `t` whose tap `j` lands inside the unpadded input.
fn valid_taps(len: usize, lout: usize, stride: usize, pad: usize, j: usize) -> (usize, usize) {
    let lo = if pad > j {
        (pad - j).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + pad > j {
        ((len + pad - j - 1) / stride + 1).min(lout)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
    cols: &mut [T],
) {
    for j in 0..k {
        let (lo, hi) = valid_taps(len, lout, stride, pad, j);
        for c in 0..cin {
            let xc = &x[c * len..(c + 1) * len];
            let row = &mut cols[(c * k + j) * lout..(c * k + j + 1) * lout];
            row[..lo].fill(T::zero());
            row[hi..].fill(T::zero());
            if stride == 1 {
                row[lo..hi].copy_from_slice(&xc[lo + j - pad..hi + j - pad]);
            } else {
                for (t, v) in row[lo..hi].iter_mut().enumerate() {
                    *v = xc[(lo + t) * stride + j - pad];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    cin: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
    dx: &mut [T],
) {
    for j in 0..k {
        let (lo, hi) = valid_taps(len, lout, stride, pad, j);
        for c in 0..cin {
            let dxc = &mut dx[c * len..(c + 1) * len];
            let row = &cols[(c * k + j) * lout + lo..(c * k + j) * lout + hi];
            if stride == 1 {
                dxc[lo + j - pad..hi + j - pad]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(d, &v)| *d += v);
            } else {
                for (t, &v) in row.iter().enumerate() {
                    dxc[(lo + t) * stride + j - pad] += v;
                }
            }
        }
    }
}

fn axpy<T: Scalar>(acc: &mut [T], src: &[T], a: T) {
    acc.iter_mut().zip(src).for_each(|(d, &s)| *d += a * s);
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    T::of(lane_dot(a, b))
}

/// Copy `[cin, len]` into `[cin, len + 2·pad]` with zeroed margins.
fn pad_rows<T: Scalar>(x: &[T], cin: usize, len: usize, pad: usize, out: &mut [T]) {
    let lp = len + 2 * pad;
    for (dst, src) in out.chunks_exact_mut(lp).zip(x.chunks_exact(len)).take(cin) {
        dst[..pad].fill(T::zero());
        dst[pad..pad + len].copy_from_slice(src);
        dst[pad + len..].fill(T::zero());
    }
}

/// Direct stride-1 kernels beat im2col + GEMM when the weight is small
/// (measured crossover around 640 weights).
fn use_direct(cin: usize, cout: usize, k: usize, stride: usize) -> bool {
    stride == 1 && cout * cin * k <= 640
}

/// `x: [B, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]` → `[B, Cout, Lout]`.
pub(crate) fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (batch, cin, len) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (cout, k) = (w.dims()[0], w.dims()[2]);
    let lout = conv_out_len(len, k, stride, pad);
    let mut out = Tensor::zeros(&[batch, cout, lout]);
    if use_direct(cin, cout, k, stride) {
        let lp = len + 2 * pad;
        out.data_mut()
            .par_chunks_mut(cout * lout)
            .zip(x.data().par_chunks(cin * len))
            .for_each_init(
                || vec![T::zero(); cin * lp],
                |xp, (ob, xb)| {
                    pad_rows(xb, cin, len, pad, xp);
                    for (o, orow) in ob.chunks_exact_mut(lout).enumerate() {
                        orow.fill(b.map_or(T::zero(), |b| b.data()[o]));
                        for c in 0..cin {
                            let wk = &w.data()[(o * cin + c) * k..(o * cin + c + 1) * k];
                            for (j, &wv) in wk.iter().enumerate() {
                                axpy(orow, &xp[c * lp + j..c * lp + j + lout], wv);
                            }
                        }
                    }
                },
            );
        return out;
    }
    let direct = k == 1 && stride == 1 && pad == 0;
    out.data_mut()
        .par_chunks_mut(cout * lout)
        .zip(x.data().par_chunks(cin * len))
        .for_each_init(
            || {
                if direct {
                    Vec::new()
                } else {
                    vec![T::zero(); cin * k * lout]
                }
            },
            |cols, (ob, xb)| {
                if direct {
                    matmul(w.data(), false, xb, false, ob, cout, cin, lout, false);
                } else {
                    im2col(xb, cin, len, k, stride, pad, lout, cols);
                    matmul(w.data(), false, cols, false, ob, cout, cin * k, lout, false);
                }
                if let Some(b) = b {
                    for (row, &bias) in ob.chunks_exact_mut(lout).zip(b.data()) {
                        row.iter_mut().for_each(|v| *v += bias);
                    }
                }
            },
        );
    out
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (cin, len) = (x.dims()[1], x.dims()[2]);
    let (cout, k) = (w.dims()[0], w.dims()[2]);
    let lout = grad.dims()[2];
    let mut dx = Tensor::zeros(x.dims());
    let direct = use_direct(cin, cout, k, stride);
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .data_mut()
        .par_chunks_mut(GROUP * cin * len)
        .zip(x.data().par_chunks(GROUP * cin * len))
        .zip(grad.data().par_chunks(GROUP * cout * lout))
        .map(|((dxg, xg), gg)| {
            let mut dw = vec![T::zero(); cout * cin * k];
            let mut db = vec![T::zero(); cout];
            if direct {
                let lp = len + 2 * pad;
                let mut xp = vec![T::zero(); cin * lp];
                let mut dxp = vec![T::zero(); cin * lp];
                for ((dxb, xb), gb) in dxg
                    .chunks_exact_mut(cin * len)
                    .zip(xg.chunks_exact(cin * len))
                    .zip(gg.chunks_exact(cout * lout))
                {
                    pad_rows(xb, cin, len, pad, &mut xp);
                    dxp.fill(T::zero());
                    for (o, grow) in gb.chunks_exact(lout).enumerate() {
                        db[o] += grow.iter().copied().sum::<T>();
                        for c in 0..cin {
                            let base = (o * cin + c) * k;
                            for j in 0..k {
                                dw[base + j] += dot(grow, &xp[c * lp + j..c * lp + j + lout]);
                            }
                        }
                    }
                    for c in 0..cin {
                        let dxc = &mut dxp[c * lp..(c + 1) * lp];
                        for (o, grow) in gb.chunks_exact(lout).enumerate() {
                            let wk = &w.data()[(o * cin + c) * k..(o * cin + c + 1) * k];
                            for (j, &wv) in wk.iter().enumerate() {
                                axpy(&mut dxc[j..j + lout], grow, wv);
                            }
                        }
                        dxb[c * len..(c + 1) * len].copy_from_slice(&dxc[pad..pad + len]);
                    }
                }
                return (dw, db);
            }
            let mut cols = vec![T::zero(); cin * k * lout];
            let mut dcols = vec![T::zero(); cin * k * lout];
            for ((dxb, xb), gb) in dxg
                .chunks_exact_mut(cin * len)
                .zip(xg.chunks_exact(cin * len))
                .zip(gg.chunks_exact(cout * lout))
            {
                im2col(xb, cin, len, k, stride, pad, lout, &mut cols);
                matmul(gb, false, &cols, true, &mut dw, cout, lout, cin * k, true);
                for (acc, row) in db.iter_mut().zip(gb.chunks_exact(lout)) {
                    *acc += row.iter().copied().sum::<T>();
                }
                matmul(
                    w.data(),
                    true,
                    gb,
                    false,
                    &mut dcols,
                    cin * k,
                    cout,
                    lout,
                    false,
                );
                col2im_add(&dcols, cin, len, k, stride, pad, lout, dxb);
            }
            (dw, db)
        })
        .collect();
    let mut dw = Tensor::zeros(w.dims());
    let mut db = Tensor::zeros(&[cout]);
    for (pw, pb) in partials {
        dw.data_mut().iter_mut().zip(pw).for_each(|(a, b)| *a += b);
        db.data_mut().iter_mut().zip(pb).for_each(|(a, b)| *a += b);
    }
    (dx, dw, db)
}

/// Batch-norm geometry: `(batch, channels, positions)`; 2-D input has one position.
fn bn_geometry(dims: &[usize]) -> (usize, usize, usize) {
    match *dims {
        [b, c, l] => (b, c, l),
        [b, c] => (b, c, 1),
        _ => unreachable!("batch norm validated to rank 2 or 3"),
    }
}

pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Row sum over sixteen native-precision lanes, widened once at the end.
fn lane_sum<T: Scalar>(row: &[T], f: impl Fn(T) -> T) -> f64 {
    let mut acc = [T::zero(); 16];
    let chunks = row.chunks_exact(16);
    let tail = chunks.remainder().iter().fold(T::zero(), |s, &v| s + f(v));
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += f(v);
        }
    }
    acc.iter().map(|a| a.f64()).sum::<f64>() + tail.f64()
}

/// Sum of elementwise products over sixteen native-precision lanes.
fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [T::zero(); 16];
    let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (xa, xb) in ca.zip(cb) {
        for ((l, &x), &y) in acc.iter_mut().zip(xa).zip(xb) {
            *l += x * y;
        }
    }
    acc.iter().map(|a| a.f64()).sum::<f64>() + tail.f64()
}

fn rows_of<T>(
    data: &[T],
    batch: usize,
    ch: usize,
    len: usize,
    c: usize,
) -> impl Iterator<Item = &[T]> {
    (0..batch).map(move |b| &data[(b * ch + c) * len..(b * ch + c + 1) * len])
}

/// Training-mode batch norm; updates running statistics in place.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    eps: f64,
    momentum: f64,
) -> (Tensor<T>, BnCache<T>) {
    let (batch, ch, len) = bn_geometry(x.dims());
    let count = (batch * len) as f64;
    let xd = x.data();
    let mut out = Tensor::zeros(x.dims());
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); ch];
    for c in 0..ch {
        let sum: f64 = rows_of(xd, batch, ch, len, c)
            .map(|r| lane_sum(r, |v| v))
            .sum();
        let mean = sum / count;
        let mean_t = T::of(mean);
        let sq: f64 = rows_of(xd, batch, ch, len, c)
            .map(|r| {
                lane_sum(r, |v| {
                    let d = v - mean_t;
                    d * d
                })
            })
            .sum();
        let var = sq / count;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[c] = T::of(istd);
        let (g, bt) = (gamma.data()[c], beta.data()[c]);
        let istd_t = T::of(istd);
        for b in 0..batch {
            let range = (b * ch + c) * len..(b * ch + c + 1) * len;
            let hs = &mut xhat[range.clone()];
            for ((o, h), &v) in out.data_mut()[range.clone()]
                .iter_mut()
                .zip(hs)
                .zip(&xd[range])
            {
                *h = (v - mean_t) * istd_t;
                *o = g * *h + bt;
            }
        }
        let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
        let rm = &mut running_mean.data_mut()[c];
        *rm = T::of((1.0 - momentum) * rm.f64() + momentum * mean);
        let rv = &mut running_var.data_mut()[c];
        *rv = T::of((1.0 - momentum) * rv.f64() + momentum * unbiased);
    }
    (out, BnCache { xhat, inv_std })
}

pub(crate) fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    let (_, ch, len) = bn_geometry(x.dims());
    let mut out = x.clone();
    let coeffs: Vec<(T, T)> = (0..ch)
        .map(|c| {
            let istd = T::of(1.0 / (running_var.data()[c].f64() + eps).sqrt());
            let scale = gamma.data()[c] * istd;
            (scale, beta.data()[c] - running_mean.data()[c] * scale)
        })
        .collect();
    for (i, row) in out.data_mut().chunks_exact_mut(len).enumerate() {
        let (scale, shift) = coeffs[i % ch];
        row.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    out
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_backward<T: Scalar>(
    grad: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (batch, ch, len) = bn_geometry(grad.dims());
    let count = (batch * len) as f64;
    let gd = grad.data();
    let mut dx = Tensor::zeros(grad.dims());
    let mut dgamma = Tensor::zeros(&[ch]);
    let mut dbeta = Tensor::zeros(&[ch]);
    for c in 0..ch {
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for (gr, hr) in rows_of(gd, batch, ch, len, c).zip(rows_of(&cache.xhat, batch, ch, len, c))
        {
            sum_g += lane_sum(gr, |v| v);
            sum_gx += lane_dot(gr, hr);
        }
        dgamma.data_mut()[c] = T::of(sum_gx);
        dbeta.data_mut()[c] = T::of(sum_g);
        let scale = gamma.data()[c].f64() * cache.inv_std[c].f64() / count;
        let (a, b, k) = (
            T::of(scale * count),
            T::of(scale * sum_g),
            T::of(scale * sum_gx),
        );
        for bi in 0..batch {
            let range = (bi * ch + c) * len..(bi * ch + c + 1) * len;
            for ((d, &gv), &hv) in dx.data_mut()[range.clone()]
                .iter_mut()
                .zip(&gd[range.clone()])
                .zip(&cache.xhat[range])
            {
                *d = a * gv - b - k * hv;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// `x: [B, in]`, `w: [out, in]` → `[B, out]`.
pub(crate) fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (batch, inp) = (x.dims()[0], x.dims()[1]);
    let out_f = w.dims()[0];
    let mut out = Tensor::zeros(&[batch, out_f]);
    matmul(
        x.data(),
        false,
        w.data(),
        true,
        out.data_mut(),
        batch,
        inp,
        out_f,
        false,
    );
    for row in out.data_mut().chunks_exact_mut(out_f) {
        row.iter_mut()
            .zip(b.data())
            .for_each(|(v, &bias)| *v += bias);
    }
    out
}

pub(crate) fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (batch, inp) = (x.dims()[0], x.dims()[1]);
    let out_f = w.dims()[0];
    let mut dx = Tensor::zeros(x.dims());
    let mut dw = Tensor::zeros(w.dims());
    let mut db = Tensor::zeros(&[out_f]);
    matmul(
        grad.data(),
        true,
        x.data(),
        false,
        dw.data_mut(),
        out_f,
        batch,
        inp,
        false,
    );
    matmul(
        grad.data(),
        false,
        w.data(),
        false,
        dx.data_mut(),
        batch,
        out_f,
        inp,
        false,
    );
    for row in grad.data().chunks_exact(out_f) {
        db.data_mut()
            .iter_mut()
            .zip(row)
            .for_each(|(a, &g)| *a += g);
    }
    (dx, dw, db)
}

pub(crate) fn relu_forward<T: Scalar>(mut x: Tensor<T>) -> Tensor<T> {
    x.data_mut()
        .iter_mut()
        .for_each(|v| *v = if *v < T::zero() { T::zero() } else { *v });
    x
}

/// Positions where a ReLU output is strictly positive.
pub(crate) fn relu_mask<T: Scalar>(output: &Tensor<T>) -> Vec<bool> {
    output.data().iter().map(|&y| y > T::zero()).collect()
}

/// Gradient passes where the forward output was strictly positive.
pub(crate) fn relu_backward<T: Scalar>(mask: &[bool], mut grad: Tensor<T>) -> Tensor<T> {
    grad.data_mut()
        .iter_mut()
        .zip(mask)
        .for_each(|(g, &on)| *g = if on { *g } else { T::zero() });
    grad
}

pub(crate) fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (batch, ch, len) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let inv = 1.0 / len as f64;
    let data = x
        .data()
        .chunks_exact(len)
        .map(|row| T::of(lane_sum(row, |v| v) * inv))
        .collect();
    Tensor::new(vec![batch, ch], data).expect("pooled dims")
}

pub(crate) fn gap_backward<T: Scalar>(grad: &Tensor<T>, len: usize) -> Tensor<T> {
    let (batch, ch) = (grad.dims()[0], grad.dims()[1]);
    let inv = T::of(1.0 / len as f64);
    let mut out = Tensor::zeros(&[batch, ch, len]);
    for (row, &g) in out.data_mut().chunks_exact_mut(len).zip(grad.data()) {
        row.fill(g * inv);
    }
    out
}
