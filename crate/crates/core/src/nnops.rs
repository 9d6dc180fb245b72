//! Differentiable neural-network building blocks on channels-last tensors:
//! convolutions, batch normalization, bilinear upsampling, depth collapse and
//! the two stochastic regularizers (DropPath and Channel Dropout).

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// im2col chunks are capped at this many `f64` entries.
const COL_BUDGET: usize = 1 << 19;

/// Safe wrapper over `matrixmultiply::dgemm`:
/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` given by
/// row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(k == 0 || a.len() >= extent(m, k, rsa, csa));
    assert!(k == 0 || b.len() >= extent(k, n, rsb, csb));
    assert!(c.len() >= extent(m, n, rsc, csc));
    // SAFETY: the asserts above keep every access in bounds, and `c` does
    // not alias `a` or `b` (it is a distinct &mut borrow).
    unsafe {
        matrixmultiply::dgemm(
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a 3D convolution on `(N, D, H, W, Ci)` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub in_c: usize,
    pub out_c: usize,
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<ConvGeometry> {
        if x_shape.len() != 5 || w_shape.len() != 5 {
            return Err(Error::invalid("conv3d", "expected x (N,D,H,W,C) and w (O,I,kD,kH,kW)"));
        }
        if x_shape[4] != w_shape[1] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                expected: vec![w_shape[1]],
                found: vec![x_shape[4]],
            });
        }
        if stride.contains(&0) {
            return Err(Error::invalid("conv3d", "stride must be positive"));
        }
        let kernel = [w_shape[2], w_shape[3], w_shape[4]];
        if w_shape[1] * kernel.iter().product::<usize>() == 0 {
            return Err(Error::invalid("conv3d", "empty fan-in"));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = x_shape[a + 1] + 2 * pad[a];
            if padded < kernel[a] {
                return Err(Error::invalid(
                    "conv3d",
                    format!("kernel {} larger than padded input {padded} on spatial axis {a}", kernel[a]),
                ));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(ConvGeometry {
            batch: x_shape[0],
            input: [x_shape[1], x_shape[2], x_shape[3]],
            output,
            kernel,
            stride,
            pad,
            in_c: w_shape[1],
            out_c: w_shape[0],
        })
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the im2col matrix: one per kernel tap and input channel.
    fn col_width(&self) -> usize {
        self.taps() * self.in_c
    }

    fn in_positions(&self) -> usize {
        self.input.iter().product()
    }

    fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn chunk_rows(&self) -> usize {
        (COL_BUDGET / self.col_width()).clamp(1, self.out_positions())
    }

    /// Input offset (in positions) of every tap for output `p`, or `None`
    /// when the tap falls into the zero padding.
    fn for_each_tap(&self, p: usize, mut f: impl FnMut(usize, Option<usize>)) {
        let [_, oh, ow] = self.output;
        let (od_i, rem) = (p / (oh * ow), p % (oh * ow));
        let (oh_i, ow_i) = (rem / ow, rem % ow);
        let [id, ih, iw] = self.input;
        let mut tap = 0;
        for a in 0..self.kernel[0] {
            let z = (od_i * self.stride[0] + a) as isize - self.pad[0] as isize;
            for b in 0..self.kernel[1] {
                let y = (oh_i * self.stride[1] + b) as isize - self.pad[1] as isize;
                for c in 0..self.kernel[2] {
                    let x = (ow_i * self.stride[2] + c) as isize - self.pad[2] as isize;
                    let inside = z >= 0
                        && y >= 0
                        && x >= 0
                        && (z as usize) < id
                        && (y as usize) < ih
                        && (x as usize) < iw;
                    let src = inside.then(|| ((z as usize) * ih + y as usize) * iw + x as usize);
                    f(tap, src);
                    tap += 1;
                }
            }
        }
    }

    /// Fills `col` (rows `p0..p0+rows`, row-major `rows x col_width`).
    fn im2col(&self, x: &[f64], p0: usize, rows: usize, col: &mut [f64]) {
        let ci = self.in_c;
        let kw = self.col_width();
        for r in 0..rows {
            let row = &mut col[r * kw..(r + 1) * kw];
            self.for_each_tap(p0 + r, |tap, src| {
                let dst = &mut row[tap * ci..(tap + 1) * ci];
                match src {
                    Some(s) => dst.copy_from_slice(&x[s * ci..(s + 1) * ci]),
                    None => dst.fill(0.0),
                }
            });
        }
    }

    /// Scatter-adds `col` back onto the input gradient.
    fn col2im(&self, col: &[f64], p0: usize, rows: usize, dx: &mut [f64]) {
        let ci = self.in_c;
        let kw = self.col_width();
        for r in 0..rows {
            let row = &col[r * kw..(r + 1) * kw];
            self.for_each_tap(p0 + r, |tap, src| {
                if let Some(s) = src {
                    let dst = &mut dx[s * ci..(s + 1) * ci];
                    for (d, v) in dst.iter_mut().zip(&row[tap * ci..(tap + 1) * ci]) {
                        *d += v;
                    }
                }
            });
        }
    }
}

/// `(O, I, kD, kH, kW)` weights as a `(kD*kH*kW*I) x O` matrix.
fn weight_matrix(w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (o, i, taps) = (g.out_c, g.in_c, g.taps());
    let mut m = vec![0.0; taps * i * o];
    for co in 0..o {
        for ci in 0..i {
            for t in 0..taps {
                m[(t * i + ci) * o + co] = w[(co * i + ci) * taps + t];
            }
        }
    }
    m
}

fn weight_from_matrix(m: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (o, i, taps) = (g.out_c, g.in_c, g.taps());
    let mut w = vec![0.0; taps * i * o];
    for co in 0..o {
        for ci in 0..i {
            for t in 0..taps {
                w[(co * i + ci) * taps + t] = m[(t * i + ci) * o + co];
            }
        }
    }
    w
}

fn conv_forward(x: &[f64], wm: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (ci, co) = (g.in_c, g.out_c);
    let kw = g.col_width();
    let in_len = g.in_positions() * ci;
    let out_pos = g.out_positions();
    let mut out = vec![0.0; g.batch * out_pos * co];
    let rows = g.chunk_rows();
    out.par_chunks_mut(out_pos * co).enumerate().for_each(|(n, out_n)| {
        let x_n = &x[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm(out_pos, ci, co, x_n, (ci, 1), wm, (co, 1), 0.0, out_n, (co, 1));
        } else {
            let mut col = vec![0.0; rows * kw];
            let mut p0 = 0;
            while p0 < out_pos {
                let r = rows.min(out_pos - p0);
                g.im2col(x_n, p0, r, &mut col);
                gemm(r, kw, co, &col, (kw, 1), wm, (co, 1), 0.0, &mut out_n[p0 * co..(p0 + r) * co], (co, 1));
                p0 += r;
            }
        }
        if let Some(b) = bias {
            for row in out_n.chunks_exact_mut(co) {
                row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
            }
        }
    });
    out
}

/// Gradients `(dx, dW matrix, db)` of a convolution.
fn conv_backward(
    x: &[f64],
    wm: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
    need_x: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ci, co) = (g.in_c, g.out_c);
    let kw = g.col_width();
    let in_len = g.in_positions() * ci;
    let out_pos = g.out_positions();
    let rows = g.chunk_rows();

    let per_sample = |n: usize, dx_n: Option<&mut [f64]>| -> Vec<f64> {
        let x_n = &x[n * in_len..(n + 1) * in_len];
        let dy_n = &dy[n * out_pos * co..(n + 1) * out_pos * co];
        let mut dwm = vec![0.0; kw * co];
        if g.is_pointwise() {
            gemm(ci, out_pos, co, x_n, (1, ci), dy_n, (co, 1), 0.0, &mut dwm, (co, 1));
            if let Some(dx_n) = dx_n {
                gemm(out_pos, co, ci, dy_n, (co, 1), wm, (1, co), 0.0, dx_n, (ci, 1));
            }
            return dwm;
        }
        let mut col = vec![0.0; rows * kw];
        let mut dcol = if dx_n.is_some() { vec![0.0; rows * kw] } else { Vec::new() };
        let mut dx_n = dx_n;
        let mut p0 = 0;
        while p0 < out_pos {
            let r = rows.min(out_pos - p0);
            let dy_c = &dy_n[p0 * co..(p0 + r) * co];
            g.im2col(x_n, p0, r, &mut col);
            gemm(kw, r, co, &col, (1, kw), dy_c, (co, 1), 1.0, &mut dwm, (co, 1));
            if let Some(dx_n) = dx_n.as_deref_mut() {
                gemm(r, co, kw, dy_c, (co, 1), wm, (1, co), 0.0, &mut dcol, (kw, 1));
                g.col2im(&dcol, p0, r, dx_n);
            }
            p0 += r;
        }
        dwm
    };

    let (dx, partials): (Option<Vec<f64>>, Vec<Vec<f64>>) = if need_x {
        let mut dx = vec![0.0; g.batch * in_len];
        let partials = dx
            .par_chunks_mut(in_len)
            .enumerate()
            .map(|(n, dx_n)| per_sample(n, Some(dx_n)))
            .collect();
        (Some(dx), partials)
    } else {
        ((None), (0..g.batch).into_par_iter().map(|n| per_sample(n, None)).collect())
    };
    let mut dwm = vec![0.0; kw * co];
    for p in &partials {
        dwm.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let mut db = vec![0.0; co];
    for row in dy.chunks_exact(co) {
        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    (dx, dwm, db)
}

/// 3D cross-correlation of `x: (N, D, H, W, Ci)` with `w: (Co, Ci, kD, kH, kW)`
/// plus an optional bias `(Co)`, with zero padding.
pub fn conv3d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_c] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                expected: vec![g.out_c],
                found: b.shape().to_vec(),
            });
        }
    }
    let wm = weight_matrix(w.data(), &g);
    let out = conv_forward(x.data(), &wm, bias.map(|b| b.data()), &g);
    let shape = vec![g.batch, g.output[0], g.output[1], g.output[2], g.out_c];
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let xs = x.clone();
    Tensor::from_op(
        "conv3d",
        shape,
        out,
        parents,
        Box::new(move |dy, needs| {
            let (dx, dwm, db) = conv_backward(xs.data(), &wm, dy, &g, needs[0]);
            let mut grads = vec![dx, needs[1].then(|| weight_from_matrix(&dwm, &g))];
            if needs.len() > 2 {
                grads.push(needs[2].then_some(db));
            }
            grads
        }),
    )
}

/// 2D cross-correlation of `x: (N, H, W, Ci)` with `w: (Co, Ci, kH, kW)`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: [usize; 2],
    pad: [usize; 2],
) -> Result<Tensor> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::invalid("conv2d", "expected x (N,H,W,C) and w (O,I,kH,kW)"));
    }
    let xs = x.shape();
    let ws = w.shape();
    let x3 = x.reshape(&[xs[0], 1, xs[1], xs[2], xs[3]])?;
    let w3 = w.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]])?;
    let y = conv3d(&x3, &w3, bias, [1, stride[0], stride[1]], [0, pad[0], pad[1]])?;
    let ys = y.shape().to_vec();
    y.reshape(&[ys[0], ys[2], ys[3], ys[4]])
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> RunningStats {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Per-channel batch normalization over every axis but the last.
///
/// In training mode the batch statistics normalize the input and update
/// `stats` (`new = (1 - momentum) * old + momentum * batch`, unbiased batch
/// variance); in eval mode `stats` are used as-is.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    cfg: BatchNormConfig,
    training: bool,
) -> Result<Tensor> {
    let c = *x.shape().last().ok_or_else(|| Error::invalid("batch_norm", "scalar input"))?;
    for (t, name) in [(gamma, "gamma"), (beta, "beta")] {
        if t.shape() != [c] {
            return Err(Error::invalid("batch_norm", format!("{name} must have shape [{c}]")));
        }
    }
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::invalid("batch_norm", "running stats channel mismatch"));
    }
    let m = x.numel() / c.max(1);
    let (mean, var) = if training {
        if m < 2 {
            return Err(Error::invalid("batch_norm", "training mode needs at least 2 values per channel"));
        }
        let mut mean = vec![0.0; c];
        for row in x.data().chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; c];
        for row in x.data().chunks_exact(c) {
            for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        for k in 0..c {
            let unbiased = var[k] * m as f64 / (m - 1) as f64;
            stats.mean[k] = (1.0 - cfg.momentum) * stats.mean[k] + cfg.momentum * mean[k];
            stats.var[k] = (1.0 - cfg.momentum) * stats.var[k] + cfg.momentum * unbiased;
        }
        (mean, var)
    } else {
        (stats.mean.clone(), stats.var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    for ((row, xh), o) in x
        .data()
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(out.chunks_exact_mut(c))
    {
        for k in 0..c {
            xh[k] = (row[k] - mean[k]) * inv_std[k];
            o[k] = gamma.data()[k] * xh[k] + beta.data()[k];
        }
    }
    let gamma_v = gamma.to_vec();
    Tensor::from_op(
        "batch_norm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |dy, needs| {
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (g, xh) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                for k in 0..c {
                    dbeta[k] += g[k];
                    dgamma[k] += g[k] * xh[k];
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; dy.len()];
                for ((d, g), xh) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                    for k in 0..c {
                        d[k] = if training {
                            gamma_v[k] * inv_std[k] / m as f64
                                * (m as f64 * g[k] - dbeta[k] - xh[k] * dgamma[k])
                        } else {
                            g[k] * gamma_v[k] * inv_std[k]
                        };
                    }
                }
                dx
            });
            vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
        }),
    )
}

/// Source index pair and weight for align-corners-false 2x upsampling.
fn up2_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// 2-fold bilinear upsampling (align-corners false) of `(N, H, W, C)`.
pub fn bilinear_up2(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::invalid("bilinear_up2", "expected (N, H, W, C)"));
    }
    let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if h == 0 || w == 0 {
        return Err(Error::invalid("bilinear_up2", "empty spatial axis"));
    }
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * oh * ow * c];
    let src = x.data();
    for b in 0..n {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let dst = ((b * oh + oy) * ow + ox) * c;
                let corners = [
                    (y0, x0, (1.0 - ly) * (1.0 - lx)),
                    (y0, x1, (1.0 - ly) * lx),
                    (y1, x0, ly * (1.0 - lx)),
                    (y1, x1, ly * lx),
                ];
                for (yy, xx, wt) in corners {
                    if wt == 0.0 {
                        continue;
                    }
                    let s = ((b * h + yy) * w + xx) * c;
                    for k in 0..c {
                        out[dst + k] += wt * src[s + k];
                    }
                }
            }
        }
    }
    Tensor::from_op(
        "bilinear_up2",
        vec![n, oh, ow, c],
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut dx = vec![0.0; n * h * w * c];
            for b in 0..n {
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let s = ((b * oh + oy) * ow + ox) * c;
                        let corners = [
                            (y0, x0, (1.0 - ly) * (1.0 - lx)),
                            (y0, x1, (1.0 - ly) * lx),
                            (y1, x0, ly * (1.0 - lx)),
                            (y1, x1, ly * lx),
                        ];
                        for (yy, xx, wt) in corners {
                            if wt == 0.0 {
                                continue;
                            }
                            let d = ((b * h + yy) * w + xx) * c;
                            for k in 0..c {
                                dx[d + k] += wt * g[s + k];
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// Mean over the depth axis: `(N, D, H, W, C) -> (N, H, W, C)`.
pub fn depth_mean(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 5 || x.shape()[1] == 0 {
        return Err(Error::invalid("depth_mean", "expected (N, D, H, W, C) with D >= 1"));
    }
    x.mean_axes(&[1])
}

/// Multiplies each sample (leading axis) by its own constant factor.
pub fn scale_samples(x: &Tensor, factors: &[f64]) -> Result<Tensor> {
    let n = *x.shape().first().ok_or_else(|| Error::invalid("scale_samples", "scalar input"))?;
    if factors.len() != n {
        return Err(Error::invalid("scale_samples", format!("{} factors for {n} samples", factors.len())));
    }
    let per = x.numel() / n.max(1);
    let f = factors.to_vec();
    let out = x
        .data()
        .chunks(per.max(1))
        .zip(&f)
        .flat_map(|(chunk, s)| chunk.iter().map(move |v| v * s))
        .collect();
    Tensor::from_op(
        "scale_samples",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            vec![Some(
                g.chunks(per.max(1))
                    .zip(&f)
                    .flat_map(|(chunk, s)| chunk.iter().map(move |v| v * s))
                    .collect(),
            )]
        }),
    )
}

/// Multiplies `(N, .., C)` by a `(N, C)` mask broadcast over the middle axes.
pub fn mask_channels(x: &Tensor, mask: &[f64]) -> Result<Tensor> {
    let n = *x.shape().first().ok_or_else(|| Error::invalid("mask_channels", "scalar input"))?;
    let c = *x.shape().last().unwrap();
    if mask.len() != n * c {
        return Err(Error::invalid("mask_channels", "mask must have N*C entries"));
    }
    let per = x.numel() / n.max(1);
    let apply = move |src: &[f64], mask: &[f64]| -> Vec<f64> {
        src.iter()
            .enumerate()
            .map(|(i, v)| v * mask[(i / per) * c + i % c])
            .collect()
    };
    let m = mask.to_vec();
    let out = apply(x.data(), &m);
    Tensor::from_op(
        "mask_channels",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(apply(g, &m))]),
    )
}

/// Per-sample keep decisions for DropPath.
pub fn drop_path_mask<R: Rng + ?Sized>(batch: usize, rate: f64, rng: &mut R) -> Vec<bool> {
    (0..batch).map(|_| rng.gen::<f64>() >= rate).collect()
}

/// DropPath (stochastic depth) on a residual branch with an explicit keep
/// mask: kept samples are scaled by `1 / (1 - rate)`, dropped ones zeroed.
pub fn drop_path_with_mask(x: &Tensor, keep: &[bool], rate: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("drop_path", format!("rate {rate} outside [0, 1)")));
    }
    let factors: Vec<f64> = keep.iter().map(|&k| if k { 1.0 / (1.0 - rate) } else { 0.0 }).collect();
    scale_samples(x, &factors)
}

/// DropPath: identity in eval mode or at rate 0.
pub fn drop_path<R: Rng + ?Sized>(x: &Tensor, rate: f64, training: bool, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("drop_path", format!("rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let n = *x.shape().first().ok_or_else(|| Error::invalid("drop_path", "scalar input"))?;
    let keep = drop_path_mask(n, rate, rng);
    drop_path_with_mask(x, &keep, rate)
}

/// Draws the channels one Channel Dropout application zeroes: with
/// probability `rate`, between 1 and `floor(max_fraction * channels)`
/// distinct channels chosen uniformly.
pub fn draw_dropped_channels<R: Rng + ?Sized>(
    channels: usize,
    rate: f64,
    max_fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    if rng.gen::<f64>() >= rate {
        return Vec::new();
    }
    let max_drop = (max_fraction * channels as f64).floor() as usize;
    if max_drop == 0 {
        return Vec::new();
    }
    let count = rng.gen_range(1..=max_drop);
    let mut picked = sample(rng, channels, count).into_vec();
    picked.sort_unstable();
    picked
}

fn check_channel_dropout(channels: usize, rate: f64, max_fraction: f64) -> Result<()> {
    if channels == 0 {
        return Err(Error::invalid("channel_dropout", "no channels"));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("channel_dropout", format!("rate {rate} outside [0, 1)")));
    }
    if !(max_fraction > 0.0 && max_fraction <= 1.0) {
        return Err(Error::invalid("channel_dropout", format!("max_fraction {max_fraction} outside (0, 1]")));
    }
    Ok(())
}

/// Channel Dropout on `(N, .., C)`: per sample, whole channels are zeroed
/// (no rescaling). Identity in eval mode.
pub fn channel_dropout<R: Rng + ?Sized>(
    x: &Tensor,
    rate: f64,
    max_fraction: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let c = x.shape().last().copied().unwrap_or(0);
    check_channel_dropout(c, rate, max_fraction)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let n = x.shape()[0];
    let mut mask = vec![1.0; n * c];
    for b in 0..n {
        for k in draw_dropped_channels(c, rate, max_fraction, rng) {
            mask[b * c + k] = 0.0;
        }
    }
    mask_channels(x, &mask)
}

/// Kaiming-uniform bound for ReLU networks: `sqrt(6 / fan_in)`.
pub fn kaiming_uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Vec<f64> {
    let bound = kaiming_uniform_bound(fan_in);
    (0..numel(shape)).map(|_| rng.gen_range(-bound..bound)).collect()
}
