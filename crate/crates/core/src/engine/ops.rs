//! Forward and backward kernels. Batch work is split into fixed-size sample
//! chunks and partial parameter gradients are summed in chunk order, so results
//! are bitwise identical for any thread count.

use rayon::prelude::*;

use super::tensor::Tensor;

/// Samples per parallel work unit.
const CHUNK: usize = 8;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, dil: usize, h: usize, w: usize) -> Option<Self> {
        let k_eff = dil * (k - 1) + 1;
        let oh = crate::rf::window_output(h, k_eff, stride, pad)?;
        let ow = crate::rf::window_output(w, k_eff, stride, pad)?;
        Some(Self {
            cin,
            cout,
            k,
            stride,
            pad,
            dil,
            h,
            w,
            oh,
            ow,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate for output index `o` and kernel tap `t`, if inside the map.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, dil: usize, pad: usize, n: usize) -> Option<usize> {
        let v = (o * stride + t * dil) as isize - pad as isize;
        (v >= 0 && (v as usize) < n).then_some(v as usize)
    }
}

fn im2col(g: &ConvGeom, x: &[f32], col: &mut [f32]) {
    let pos = g.positions();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let out = &mut col[row * pos..(row + 1) * pos];
                for oi in 0..g.oh {
                    let dst = &mut out[oi * g.ow..(oi + 1) * g.ow];
                    match ConvGeom::src(oi, ki, g.stride, g.dil, g.pad, g.h) {
                        None => dst.fill(0.0),
                        Some(i) => {
                            let src_row = &plane[i * g.w..(i + 1) * g.w];
                            for (oj, d) in dst.iter_mut().enumerate() {
                                *d = match ConvGeom::src(oj, kj, g.stride, g.dil, g.pad, g.w) {
                                    Some(j) => src_row[j],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f32], dx: &mut [f32]) {
    let pos = g.positions();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * pos..(row + 1) * pos];
                for oi in 0..g.oh {
                    let Some(i) = ConvGeom::src(oi, ki, g.stride, g.dil, g.pad, g.h) else {
                        continue;
                    };
                    let dst_row = &mut plane[i * g.w..(i + 1) * g.w];
                    for oj in 0..g.ow {
                        if let Some(j) = ConvGeom::src(oj, kj, g.stride, g.dil, g.pad, g.w) {
                            dst_row[j] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = alpha·a (m×k)·b (k×n) + beta·c`, all strides explicit.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given shapes and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_forward(g: &ConvGeom, x: &Tensor, weight: &[f32], bias: &[f32]) -> Tensor {
    let n = x.n();
    let pos = g.positions();
    let kk = g.col_rows();
    let mut y = Tensor::zeros([n, g.cout, g.oh, g.ow]);
    let in_len = x.sample_len();
    let out_len = g.cout * pos;
    y.data
        .par_chunks_mut(out_len * CHUNK)
        .enumerate()
        .for_each(|(ci, out)| {
            let mut col = vec![0.0f32; if g.is_pointwise() { 0 } else { kk * pos }];
            for (s, y_s) in out.chunks_mut(out_len).enumerate() {
                let i = ci * CHUNK + s;
                let x_s = &x.data[i * in_len..(i + 1) * in_len];
                let col_ref: &[f32] = if g.is_pointwise() {
                    x_s
                } else {
                    im2col(g, x_s, &mut col);
                    &col
                };
                gemm(g.cout, kk, pos, weight, (kk, 1), col_ref, (pos, 1), 0.0, y_s);
                for (o, b) in bias.iter().enumerate() {
                    for v in &mut y_s[o * pos..(o + 1) * pos] {
                        *v += b;
                    }
                }
            }
        });
    y
}

/// Gradient with respect to the conv input only.
pub fn conv_backward_input(g: &ConvGeom, weight: &[f32], dy: &Tensor) -> Tensor {
    let n = dy.n();
    let pos = g.positions();
    let kk = g.col_rows();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * pos;
    let mut dx = Tensor::zeros([n, g.cin, g.h, g.w]);
    dx.data
        .par_chunks_mut(in_len * CHUNK)
        .enumerate()
        .for_each(|(ci, dxc)| {
            let mut dcol = vec![0.0f32; kk * pos];
            for (s, dx_s) in dxc.chunks_mut(in_len).enumerate() {
                let i = ci * CHUNK + s;
                let dy_s = &dy.data[i * out_len..(i + 1) * out_len];
                if g.is_pointwise() {
                    gemm(kk, g.cout, pos, weight, (1, kk), dy_s, (pos, 1), 0.0, dx_s);
                } else {
                    gemm(kk, g.cout, pos, weight, (1, kk), dy_s, (pos, 1), 0.0, &mut dcol);
                    col2im(g, &dcol, dx_s);
                }
            }
        });
    dx
}

/// Weight and bias gradients, plus the input gradient when requested.
pub fn conv_backward(
    g: &ConvGeom,
    x: &Tensor,
    weight: &[f32],
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Vec<f32>, Vec<f32>) {
    let n = x.n();
    let pos = g.positions();
    let kk = g.col_rows();
    let in_len = x.sample_len();
    let out_len = g.cout * pos;
    let chunks: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let partials: Vec<(Vec<f32>, Vec<f32>)> = chunks
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n);
            let mut dw = vec![0.0f32; g.cout * kk];
            let mut db = vec![0.0f32; g.cout];
            let mut col = vec![0.0f32; if g.is_pointwise() { 0 } else { kk * pos }];
            for i in start..end {
                let x_s = &x.data[i * in_len..(i + 1) * in_len];
                let dy_s = &dy.data[i * out_len..(i + 1) * out_len];
                let col_ref: &[f32] = if g.is_pointwise() {
                    x_s
                } else {
                    im2col(g, x_s, &mut col);
                    &col
                };
                gemm(g.cout, pos, kk, dy_s, (pos, 1), col_ref, (1, pos), 1.0, &mut dw);
                for (o, d) in db.iter_mut().enumerate() {
                    *d += dy_s[o * pos..(o + 1) * pos].iter().sum::<f32>();
                }
            }
            (dw, db)
        })
        .collect();
    let mut dw = vec![0.0f32; g.cout * kk];
    let mut db = vec![0.0f32; g.cout];
    for (pw, pb) in &partials {
        dw.iter_mut().zip(pw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
    }
    let dx = need_dx.then(|| conv_backward_input(g, weight, dy));
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(k: usize, stride: usize, pad: usize, h: usize, w: usize) -> Option<Self> {
        Some(Self {
            k,
            stride,
            pad,
            h,
            w,
            oh: crate::rf::window_output(h, k, stride, pad)?,
            ow: crate::rf::window_output(w, k, stride, pad)?,
        })
    }
}

/// Max pooling; also returns the flat input index chosen for every output.
pub fn maxpool_forward(g: &PoolGeom, x: &Tensor) -> (Tensor, Vec<u32>) {
    let (n, c) = (x.n(), x.c());
    let mut y = Tensor::zeros([n, c, g.oh, g.ow]);
    let mut arg = vec![0u32; y.data.len()];
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    for p in 0..n * c {
        let src = &x.data[p * plane_in..(p + 1) * plane_in];
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_at = 0usize;
                for ki in 0..g.k {
                    let Some(i) = ConvGeom::src(oi, ki, g.stride, 1, g.pad, g.h) else {
                        continue;
                    };
                    for kj in 0..g.k {
                        let Some(j) = ConvGeom::src(oj, kj, g.stride, 1, g.pad, g.w) else {
                            continue;
                        };
                        let v = src[i * g.w + j];
                        if v > best {
                            best = v;
                            best_at = i * g.w + j;
                        }
                    }
                }
                let o = p * plane_out + oi * g.ow + oj;
                y.data[o] = best;
                arg[o] = (p * plane_in + best_at) as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(dy: &Tensor, arg: &[u32], in_shape: [usize; 4]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    for (g, &a) in dy.data.iter().zip(arg) {
        dx.data[a as usize] += g;
    }
    dx
}

/// Average pooling; padded cells count toward the divisor.
pub fn avgpool_forward(g: &PoolGeom, x: &Tensor) -> Tensor {
    let (n, c) = (x.n(), x.c());
    let mut y = Tensor::zeros([n, c, g.oh, g.ow]);
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let scale = 1.0 / (g.k * g.k) as f32;
    for p in 0..n * c {
        let src = &x.data[p * plane_in..(p + 1) * plane_in];
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let mut s = 0.0f32;
                for ki in 0..g.k {
                    let Some(i) = ConvGeom::src(oi, ki, g.stride, 1, g.pad, g.h) else {
                        continue;
                    };
                    for kj in 0..g.k {
                        if let Some(j) = ConvGeom::src(oj, kj, g.stride, 1, g.pad, g.w) {
                            s += src[i * g.w + j];
                        }
                    }
                }
                y.data[p * plane_out + oi * g.ow + oj] = s * scale;
            }
        }
    }
    y
}

pub fn avgpool_backward(g: &PoolGeom, dy: &Tensor, in_shape: [usize; 4]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let scale = 1.0 / (g.k * g.k) as f32;
    for p in 0..in_shape[0] * in_shape[1] {
        let dst = &mut dx.data[p * plane_in..(p + 1) * plane_in];
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let v = dy.data[p * plane_out + oi * g.ow + oj] * scale;
                for ki in 0..g.k {
                    let Some(i) = ConvGeom::src(oi, ki, g.stride, 1, g.pad, g.h) else {
                        continue;
                    };
                    for kj in 0..g.k {
                        if let Some(j) = ConvGeom::src(oj, kj, g.stride, 1, g.pad, g.w) {
                            dst[i * g.w + j] += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Batch-statistics normalization. Returns the output, the normalized input,
/// per-channel inverse std and the batch mean/biased variance.
pub struct BnTrainOut {
    pub y: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

pub fn bn_forward_train(x: &Tensor, gamma: &[f32], beta: &[f32]) -> BnTrainOut {
    let (n, c) = (x.n(), x.c());
    let plane = x.h() * x.w();
    let m = (n * plane) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            s += x.data[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            q += x.data[off..off + plane].iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
        }
        mean[ch] = mu as f32;
        var[ch] = (q / m) as f32;
    }
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape);
    let mut y = Tensor::zeros(x.shape);
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            for p in off..off + plane {
                let h = (x.data[p] - mean[ch]) * inv_std[ch];
                xhat.data[p] = h;
                y.data[p] = gamma[ch] * h + beta[ch];
            }
        }
    }
    BnTrainOut {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

pub fn bn_forward_eval(x: &Tensor, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32]) -> Tensor {
    let c = x.c();
    let plane = x.h() * x.w();
    let mut y = Tensor::zeros(x.shape);
    for (p, (dst, &v)) in y.data.iter_mut().zip(&x.data).enumerate() {
        let ch = (p / plane) % c;
        let scale = gamma[ch] / (var[ch] + BN_EPS).sqrt();
        *dst = (v - mean[ch]) * scale + beta[ch];
    }
    y
}

/// Returns (dx, dgamma, dbeta).
pub fn bn_backward(dy: &Tensor, xhat: &Tensor, gamma: &[f32], inv_std: &[f32]) -> (Tensor, Vec<f32>, Vec<f32>) {
    let (n, c) = (dy.n(), dy.c());
    let plane = dy.h() * dy.w();
    let m = (n * plane) as f32;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            for p in off..off + plane {
                dgamma[ch] += dy.data[p] * xhat.data[p];
                dbeta[ch] += dy.data[p];
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape);
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let k = gamma[ch] * inv_std[ch] / m;
            for p in off..off + plane {
                dx.data[p] = k * (m * dy.data[p] - dbeta[ch] - xhat.data[p] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Uses the forward output: the gradient passes where the output is positive.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        shape: dy.shape,
        data: y
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

pub fn gap_forward(x: &Tensor) -> Tensor {
    let plane = x.h() * x.w();
    let data = x
        .data
        .chunks_exact(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Tensor::from_vec([x.n(), x.c(), 1, 1], data)
}

pub fn gap_backward(dy: &Tensor, in_shape: [usize; 4]) -> Tensor {
    let plane = in_shape[2] * in_shape[3];
    let scale = 1.0 / plane as f32;
    let mut dx = Tensor::zeros(in_shape);
    for (dst, &g) in dx.data.chunks_exact_mut(plane).zip(&dy.data) {
        dst.fill(g * scale);
    }
    dx
}

/// `y = x·Wᵀ + b` with W stored `out × in`.
pub fn dense_forward(x: &Tensor, weight: &[f32], bias: &[f32], out: usize) -> Tensor {
    let (n, f) = (x.n(), x.sample_len());
    let mut y = Tensor::zeros([n, out, 1, 1]);
    gemm(n, f, out, &x.data, (f, 1), weight, (1, f), 0.0, &mut y.data);
    for row in y.data.chunks_exact_mut(out) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
    y
}

/// Returns (dx, dW, db).
pub fn dense_backward(x: &Tensor, weight: &[f32], dy: &Tensor, out: usize) -> (Tensor, Vec<f32>, Vec<f32>) {
    let (n, f) = (x.n(), x.sample_len());
    let mut dw = vec![0.0f32; out * f];
    gemm(out, n, f, &dy.data, (1, out), &x.data, (f, 1), 0.0, &mut dw);
    let mut db = vec![0.0f32; out];
    for row in dy.data.chunks_exact(out) {
        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    let mut dx = Tensor::zeros(x.shape);
    gemm(n, out, f, &dy.data, (out, 1), weight, (f, 1), 0.0, &mut dx.data);
    (dx, dw, db)
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.sample_len();
    let mut p = logits.clone();
    for row in p.data.chunks_exact_mut(c) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    p
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let c = logits.sample_len();
    let n = logits.n();
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0f64;
    for (row, (&y, lrow)) in grad
        .data
        .chunks_exact_mut(c)
        .zip(labels.iter().zip(logits.data.chunks_exact(c)))
    {
        let max = lrow.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + lrow.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        loss += lse - lrow[y] as f64;
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n as f32);
    }
    (loss / n as f64, grad)
}
