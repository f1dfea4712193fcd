//! Forward and backward kernels for every layer kind. Spatial data is NHWC.

use crate::catalog::Activation;
use crate::scalar::Scalar;

#[inline]
fn s<S: Scalar>(v: f64) -> S {
    S::from_f64_lossy(v)
}

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

/// Geometry of a same-padded, stride-1 square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kernel: usize,
    pub filters: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one HWC sample into a `(h*w) x (k*k*cin)` patch matrix with zero
/// padding. Column order is `(ky, kx, ci)`.
pub fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, patches: &mut [S]) {
    let pad = (g.kernel / 2) as isize;
    let plen = g.patch_len();
    for oy in 0..g.h {
        for ox in 0..g.w {
            let row = &mut patches[(oy * g.w + ox) * plen..(oy * g.w + ox + 1) * plen];
            for ky in 0..g.kernel {
                let iy = oy as isize + ky as isize - pad;
                for kx in 0..g.kernel {
                    let ix = ox as isize + kx as isize - pad;
                    let dst = &mut row[(ky * g.kernel + kx) * g.cin..(ky * g.kernel + kx + 1) * g.cin];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(S::zero());
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        dst.copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
pub fn col2im_add<S: Scalar>(dpatches: &[S], g: &ConvGeom, dx: &mut [S]) {
    let pad = (g.kernel / 2) as isize;
    let plen = g.patch_len();
    for oy in 0..g.h {
        for ox in 0..g.w {
            let row = &dpatches[(oy * g.w + ox) * plen..(oy * g.w + ox + 1) * plen];
            for ky in 0..g.kernel {
                let iy = oy as isize + ky as isize - pad;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = ox as isize + kx as isize - pad;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kernel + kx) * g.cin..(ky * g.kernel + kx + 1) * g.cin];
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    for (d, v) in dx[dst..dst + g.cin].iter_mut().zip(src) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// `weight` is `(k*k*cin) x filters`, row-major.
pub fn conv_forward<S: Scalar>(x: &[S], batch: usize, g: &ConvGeom, weight: &[S], bias: &[S], y: &mut [S]) {
    let (plen, px, f) = (g.patch_len(), g.pixels(), g.filters);
    let in_per = px * g.cin;
    let out_per = px * f;
    let mut patches = vec![S::zero(); px * plen];
    for n in 0..batch {
        im2col(&x[n * in_per..(n + 1) * in_per], g, &mut patches);
        let out = &mut y[n * out_per..(n + 1) * out_per];
        for row in out.chunks_mut(f) {
            row.copy_from_slice(bias);
        }
        S::gemm(
            px,
            plen,
            f,
            S::one(),
            &patches,
            plen as isize,
            1,
            weight,
            f as isize,
            1,
            S::one(),
            out,
            f as isize,
            1,
        );
    }
}

/// Accumulates weight/bias gradients; writes the input gradient when `dx` is given.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<S: Scalar>(
    x: &[S],
    dy: &[S],
    batch: usize,
    g: &ConvGeom,
    weight: &[S],
    dweight: &mut [S],
    dbias: &mut [S],
    mut dx: Option<&mut [S]>,
) {
    let (plen, px, f) = (g.patch_len(), g.pixels(), g.filters);
    let in_per = px * g.cin;
    let out_per = px * f;
    let mut patches = vec![S::zero(); px * plen];
    let mut dpatches = vec![S::zero(); if dx.is_some() { px * plen } else { 0 }];
    for n in 0..batch {
        let xs = &x[n * in_per..(n + 1) * in_per];
        let dys = &dy[n * out_per..(n + 1) * out_per];
        im2col(xs, g, &mut patches);
        // dW += patches^T . dY
        S::gemm(
            plen,
            px,
            f,
            S::one(),
            &patches,
            1,
            plen as isize,
            dys,
            f as isize,
            1,
            S::one(),
            dweight,
            f as isize,
            1,
        );
        for row in dys.chunks(f) {
            for (b, v) in dbias.iter_mut().zip(row) {
                *b += *v;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dP = dY . W^T
            S::gemm(
                px,
                f,
                plen,
                S::one(),
                dys,
                f as isize,
                1,
                weight,
                1,
                f as isize,
                S::zero(),
                &mut dpatches,
                plen as isize,
                1,
            );
            col2im_add(&dpatches, g, &mut dx[n * in_per..(n + 1) * in_per]);
        }
    }
}

/// 2x2 / stride 2 max pooling; `argmax` receives the flat input index of
/// each output's winner.
pub fn maxpool_forward<S: Scalar>(
    x: &[S],
    batch: usize,
    (h, w, c): (usize, usize, usize),
    y: &mut [S],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / 2, w / 2);
    for n in 0..batch {
        let xb = n * h * w * c;
        let yb = n * oh * ow * c;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = xb + ((2 * oy) * w + 2 * ox) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = xb + ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    let o = yb + (oy * ow + ox) * c + ch;
                    y[o] = x[best];
                    argmax[o] = best;
                }
            }
        }
    }
}

pub fn maxpool_backward<S: Scalar>(dy: &[S], argmax: &[usize], dx: &mut [S]) {
    for (g, &i) in dy.iter().zip(argmax) {
        dx[i] += *g;
    }
}

pub fn avgpool_forward<S: Scalar>(x: &[S], batch: usize, (h, w, c): (usize, usize, usize), y: &mut [S]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter: S = s(0.25);
    for n in 0..batch {
        let xb = n * h * w * c;
        let yb = n * oh * ow * c;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let at = |dy: usize, dx: usize| x[xb + ((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                    y[yb + (oy * ow + ox) * c + ch] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter;
                }
            }
        }
    }
}

pub fn avgpool_backward<S: Scalar>(dy: &[S], batch: usize, (h, w, c): (usize, usize, usize), dx: &mut [S]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter: S = s(0.25);
    for n in 0..batch {
        let xb = n * h * w * c;
        let yb = n * oh * ow * c;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let g = dy[yb + (oy * ow + ox) * c + ch] * quarter;
                    for (ddy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        dx[xb + ((2 * oy + ddy) * w + 2 * ox + ddx) * c + ch] += g;
                    }
                }
            }
        }
    }
}

pub fn global_avgpool_forward<S: Scalar>(x: &[S], batch: usize, (h, w, c): (usize, usize, usize), y: &mut [S]) {
    let inv = S::one() / S::from_usize_lossy(h * w);
    for n in 0..batch {
        let out = &mut y[n * c..(n + 1) * c];
        out.fill(S::zero());
        for px in x[n * h * w * c..(n + 1) * h * w * c].chunks(c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += *v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
}

pub fn global_avgpool_backward<S: Scalar>(dy: &[S], batch: usize, (h, w, c): (usize, usize, usize), dx: &mut [S]) {
    let inv = S::one() / S::from_usize_lossy(h * w);
    for n in 0..batch {
        let g = &dy[n * c..(n + 1) * c];
        for px in dx[n * h * w * c..(n + 1) * h * w * c].chunks_mut(c) {
            for (d, v) in px.iter_mut().zip(g) {
                *d += *v * inv;
            }
        }
    }
}

/// Row-wise softmax over contiguous groups of `width`.
pub fn softmax_rows<S: Scalar>(x: &[S], width: usize, y: &mut [S]) {
    for (xr, yr) in x.chunks(width).zip(y.chunks_mut(width)) {
        let max = xr.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (o, v) in yr.iter_mut().zip(xr) {
            *o = (*v - max).exp();
            sum += *o;
        }
        for o in yr.iter_mut() {
            *o /= sum;
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `width` is the size of the innermost axis (used by softmax only).
pub fn activation_forward<S: Scalar>(a: Activation, x: &[S], width: usize, y: &mut [S]) {
    let zero = S::zero();
    let one = S::one();
    match a {
        Activation::Softmax => softmax_rows(x, width, y),
        _ => {
            let alpha: S = s(SELU_ALPHA);
            let scale: S = s(SELU_SCALE);
            let ceiling: S = s(S::EXP_CEILING);
            for (o, &v) in y.iter_mut().zip(x) {
                *o = match a {
                    Activation::Relu => v.max(zero),
                    Activation::Elu => {
                        if v > zero {
                            v
                        } else {
                            v.exp_m1()
                        }
                    }
                    Activation::Selu => {
                        if v > zero {
                            scale * v
                        } else {
                            scale * alpha * v.exp_m1()
                        }
                    }
                    Activation::Sigmoid => sigmoid(v),
                    Activation::Softplus => v.max(zero) + (-v.abs()).exp().ln_1p(),
                    Activation::Softsign => v / (one + v.abs()),
                    Activation::Tanh => v.tanh(),
                    Activation::Exponential => v.exp().min(ceiling),
                    Activation::Softmax => unreachable!(),
                };
            }
        }
    }
}

/// Accumulates `dx += dy * f'(x)` given forward input `x` and output `y`.
pub fn activation_backward<S: Scalar>(a: Activation, x: &[S], y: &[S], dy: &[S], width: usize, dx: &mut [S]) {
    let zero = S::zero();
    let one = S::one();
    if a == Activation::Softmax {
        for ((yr, gr), dr) in y.chunks(width).zip(dy.chunks(width)).zip(dx.chunks_mut(width)) {
            let dot = yr.iter().zip(gr).fold(zero, |acc, (p, g)| acc + *p * *g);
            for ((d, p), g) in dr.iter_mut().zip(yr).zip(gr) {
                *d += *p * (*g - dot);
            }
        }
        return;
    }
    let alpha: S = s(SELU_ALPHA);
    let scale: S = s(SELU_SCALE);
    let ceiling: S = s(S::EXP_CEILING);
    for i in 0..x.len() {
        let (v, out, g) = (x[i], y[i], dy[i]);
        let d = match a {
            Activation::Relu => {
                if v > zero {
                    one
                } else {
                    zero
                }
            }
            Activation::Elu => {
                if v > zero {
                    one
                } else {
                    v.exp()
                }
            }
            Activation::Selu => {
                if v > zero {
                    scale
                } else {
                    scale * alpha * v.exp()
                }
            }
            Activation::Sigmoid => out * (one - out),
            Activation::Softplus => sigmoid(v),
            Activation::Softsign => {
                let t = one + v.abs();
                one / (t * t)
            }
            Activation::Tanh => one - out * out,
            Activation::Exponential => {
                let e = v.exp();
                if e < ceiling {
                    e
                } else {
                    zero
                }
            }
            Activation::Softmax => unreachable!(),
        };
        dx[i] += g * d;
    }
}

/// `weight` is `inputs x units`, row-major.
pub fn dense_forward<S: Scalar>(x: &[S], batch: usize, inputs: usize, weight: &[S], bias: &[S], y: &mut [S]) {
    let units = bias.len();
    for row in y.chunks_mut(units) {
        row.copy_from_slice(bias);
    }
    S::gemm(
        batch,
        inputs,
        units,
        S::one(),
        x,
        inputs as isize,
        1,
        weight,
        units as isize,
        1,
        S::one(),
        y,
        units as isize,
        1,
    );
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<S: Scalar>(
    x: &[S],
    dy: &[S],
    batch: usize,
    inputs: usize,
    weight: &[S],
    dweight: &mut [S],
    dbias: &mut [S],
    dx: Option<&mut [S]>,
) {
    let units = dbias.len();
    // dW += x^T . dY
    S::gemm(
        inputs,
        batch,
        units,
        S::one(),
        x,
        1,
        inputs as isize,
        dy,
        units as isize,
        1,
        S::one(),
        dweight,
        units as isize,
        1,
    );
    for row in dy.chunks(units) {
        for (b, v) in dbias.iter_mut().zip(row) {
            *b += *v;
        }
    }
    if let Some(dx) = dx {
        // dX += dY . W^T
        S::gemm(
            batch,
            units,
            inputs,
            S::one(),
            dy,
            units as isize,
            1,
            weight,
            1,
            units as isize,
            S::one(),
            dx,
            inputs as isize,
            1,
        );
    }
}

/// Batch statistics retained for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache<S> {
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Training-mode batch norm over all positions of each of `c` channels.
pub fn batchnorm_forward_train<S: Scalar>(
    x: &[S],
    c: usize,
    eps: S,
    gamma: &[S],
    beta: &[S],
    y: &mut [S],
) -> BatchNormCache<S> {
    let m = S::from_usize_lossy(x.len() / c);
    let mut mean = vec![S::zero(); c];
    for row in x.chunks(c) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += *v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m);
    let mut var = vec![S::zero(); c];
    for row in x.chunks(c) {
        for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = *v - *mu;
            *a += d * d;
        }
    }
    var.iter_mut().for_each(|a| *a /= m);
    let inv_std: Vec<S> = var.iter().map(|v| S::one() / (*v + eps).sqrt()).collect();
    let mut xhat = vec![S::zero(); x.len()];
    for ((xr, hr), yr) in x.chunks(c).zip(xhat.chunks_mut(c)).zip(y.chunks_mut(c)) {
        for j in 0..c {
            hr[j] = (xr[j] - mean[j]) * inv_std[j];
            yr[j] = gamma[j] * hr[j] + beta[j];
        }
    }
    BatchNormCache {
        xhat,
        inv_std,
        mean,
        var,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_infer<S: Scalar>(
    x: &[S],
    c: usize,
    eps: S,
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
    y: &mut [S],
) {
    let scale: Vec<S> = (0..c)
        .map(|j| gamma[j] / (running_var[j] + eps).sqrt())
        .collect();
    for (xr, yr) in x.chunks(c).zip(y.chunks_mut(c)) {
        for j in 0..c {
            yr[j] = (xr[j] - running_mean[j]) * scale[j] + beta[j];
        }
    }
}

pub fn batchnorm_backward_train<S: Scalar>(
    cache: &BatchNormCache<S>,
    dy: &[S],
    c: usize,
    gamma: &[S],
    dgamma: &mut [S],
    dbeta: &mut [S],
    dx: &mut [S],
) {
    let m = S::from_usize_lossy(dy.len() / c);
    let mut sum_dxhat = vec![S::zero(); c];
    let mut sum_dxhat_xhat = vec![S::zero(); c];
    for (gr, hr) in dy.chunks(c).zip(cache.xhat.chunks(c)) {
        for j in 0..c {
            dgamma[j] += gr[j] * hr[j];
            dbeta[j] += gr[j];
            let dxh = gr[j] * gamma[j];
            sum_dxhat[j] += dxh;
            sum_dxhat_xhat[j] += dxh * hr[j];
        }
    }
    for ((gr, hr), dr) in dy.chunks(c).zip(cache.xhat.chunks(c)).zip(dx.chunks_mut(c)) {
        for j in 0..c {
            let dxh = gr[j] * gamma[j];
            dr[j] += cache.inv_std[j] / m * (m * dxh - sum_dxhat[j] - hr[j] * sum_dxhat_xhat[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop same-padded convolution.
    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64], b: &[f64]) -> Vec<f64> {
        let pad = (g.kernel / 2) as isize;
        let mut y = vec![0.0; g.h * g.w * g.filters];
        for oy in 0..g.h {
            for ox in 0..g.w {
                for f in 0..g.filters {
                    let mut acc = b[f];
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            let iy = oy as isize + ky as isize - pad;
                            let ix = ox as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                continue;
                            }
                            for c in 0..g.cin {
                                let xv = x[(iy as usize * g.w + ix as usize) * g.cin + c];
                                let wv = w[((ky * g.kernel + kx) * g.cin + c) * g.filters + f];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[(oy * g.w + ox) * g.filters + f] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loops() {
        let g = ConvGeom {
            h: 5,
            w: 5,
            cin: 2,
            kernel: 3,
            filters: 4,
        };
        let x: Vec<f64> = (0..50).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let w: Vec<f64> = (0..g.patch_len() * 4).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let mut y = vec![0.0; 100];
        conv_forward(&x, 1, &g, &w, &b, &mut y);
        for (a, e) in y.iter().zip(naive_conv(&x, &g, &w, &b)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut y = vec![0.0f64; 10];
        softmax_rows(&[0.0; 10], 10, &mut y);
        assert!(y.iter().all(|&p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut y = vec![0.0f32; 3];
        softmax_rows(&[1e30, 0.0, -1e30], 3, &mut y);
        assert_eq!(y, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn pooling_values() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect(); // 4x4x1
        let mut y = vec![0.0; 4];
        let mut arg = vec![0; 4];
        maxpool_forward(&x, 1, (4, 4, 1), &mut y, &mut arg);
        assert_eq!(y, vec![5.0, 7.0, 13.0, 15.0]);
        avgpool_forward(&x, 1, (4, 4, 1), &mut y);
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
        let mut g = vec![0.0; 1];
        global_avgpool_forward(&x, 1, (4, 4, 1), &mut g);
        assert_eq!(g, vec![7.5]);
    }

    #[test]
    fn odd_pooling_drops_trailing_row() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect(); // 3x3x1
        let mut y = vec![0.0; 1];
        let mut arg = vec![0; 1];
        maxpool_forward(&x, 1, (3, 3, 1), &mut y, &mut arg);
        assert_eq!(y, vec![4.0]);
        assert_eq!(arg, vec![4]);
    }

    #[test]
    fn exponential_is_clamped() {
        let mut y = vec![0.0f32; 2];
        activation_forward(Activation::Exponential, &[1000.0, 0.0], 2, &mut y);
        assert_eq!(y, vec![1.0e8, 1.0]);
        let mut dx = vec![0.0f32; 2];
        activation_backward(Activation::Exponential, &[1000.0, 0.0], &y, &[1.0, 1.0], 2, &mut dx);
        assert_eq!(dx, vec![0.0, 1.0]);
    }

    #[test]
    fn activation_spot_values() {
        let x = [-1.0f64, 0.5];
        let mut y = [0.0; 2];
        let cases: [(Activation, [f64; 2]); 7] = [
            (Activation::Relu, [0.0, 0.5]),
            (Activation::Elu, [(-1.0f64).exp() - 1.0, 0.5]),
            (Activation::Selu, [SELU_SCALE * SELU_ALPHA * ((-1.0f64).exp() - 1.0), SELU_SCALE * 0.5]),
            (Activation::Sigmoid, [1.0 / (1.0 + 1.0f64.exp()), 1.0 / (1.0 + (-0.5f64).exp())]),
            (Activation::Softplus, [(1.0 + (-1.0f64).exp()).ln(), (1.0 + 0.5f64.exp()).ln()]),
            (Activation::Softsign, [-0.5, 0.5 / 1.5]),
            (Activation::Tanh, [(-1.0f64).tanh(), 0.5f64.tanh()]),
        ];
        for (a, want) in cases {
            activation_forward(a, &x, 2, &mut y);
            for (got, w) in y.iter().zip(want) {
                assert!((got - w).abs() < 1e-14, "{a:?}: {got} vs {w}");
            }
        }
    }
}
