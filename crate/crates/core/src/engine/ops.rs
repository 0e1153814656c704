//! Forward kernels and their backward rules as pure functions over [`Tensor`]s.
//!
//! The tape in [`super::tape`] records calls into these functions; they are
//! also usable directly for inference-only code and for composing reference
//! computations in tests.

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
/// Weight of the previous running statistic in the batch-norm update.
pub const BN_MOMENTUM: f32 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output is `ceil(in / stride)`; odd padding goes to the bottom/right.
    Same,
    /// No padding; output is `floor((in - k) / stride) + 1`.
    Valid,
}

/// Resolves output extent and leading padding along one spatial axis.
fn axis_geometry(
    op: &'static str,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid(
            op,
            format!("kernel ({kernel}) and stride ({stride}) must be >= 1"),
        ));
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if kernel > input {
                return Err(Error::invalid(
                    op,
                    format!("window {kernel} exceeds spatial extent {input}"),
                ));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

/// Sliding-window geometry shared by convolution and max pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl WindowGeometry {
    pub fn new(
        op: &'static str,
        (in_h, in_w): (usize, usize),
        (k_h, k_w): (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (out_h, pad_top) = axis_geometry(op, in_h, k_h, stride, padding)?;
        let (out_w, pad_left) = axis_geometry(op, in_w, k_w, stride, padding)?;
        Ok(WindowGeometry {
            in_h,
            in_w,
            k_h,
            k_w,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `k`, or `None`
    /// when it lands in padding.
    #[inline]
    fn src_row(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.pad_top)
            .filter(|&r| r < self.in_h)
    }

    #[inline]
    fn src_col(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.pad_left)
            .filter(|&c| c < self.in_w)
    }
}

/// Row-major `c = a * b + beta * c`, with optional transposition of the
/// stored operands. `a` is `m x k` after transposition, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths match the m/k/n extents and strides above.
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

fn im2col(image: &[f32], channels: usize, g: &WindowGeometry, col: &mut [f32]) {
    let ohw = g.out_h * g.out_w;
    for c in 0..channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.k_h {
            for j in 0..g.k_w {
                let row = ((c * g.k_h + i) * g.k_w + j) * ohw;
                let dst = &mut col[row..row + ohw];
                for oy in 0..g.out_h {
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.src_row(oy, i) {
                        None => dst_row.fill(0.0),
                        Some(y) => {
                            let src = &plane[y * g.in_w..(y + 1) * g.in_w];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                *d = g.src_col(ox, j).map_or(0.0, |x| src[x]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], channels: usize, g: &WindowGeometry, image: &mut [f32]) {
    let ohw = g.out_h * g.out_w;
    for c in 0..channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.k_h {
            for j in 0..g.k_w {
                let row = ((c * g.k_h + i) * g.k_w + j) * ohw;
                let src = &col[row..row + ohw];
                for oy in 0..g.out_h {
                    let Some(y) = g.src_row(oy, i) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(x) = g.src_col(ox, j) {
                            plane[y * g.in_w + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `weight` is `K x C x kh x kw`, `bias` has `K` entries.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor, WindowGeometry)> {
    let (n, c, h, w) = input.dims4()?;
    let (k, wc, kh, kw) = weight.dims4().map_err(|_| {
        Error::shape(
            "conv2d",
            format!("weight must be K x C x kh x kw, got {:?}", weight.shape()),
        )
    })?;
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {:?} has {c} channels but weight {:?} expects {wc}",
                input.shape(),
                weight.shape()
            ),
        ));
    }
    if bias.numel() != k {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} does not match {k} filters", bias.shape()),
        ));
    }
    let g = WindowGeometry::new("conv2d", (h, w), (kh, kw), stride, padding)?;
    let ohw = g.out_h * g.out_w;
    let ckk = c * kh * kw;
    let mut out = vec![0.0f32; n * k * ohw];
    let mut col = vec![0.0f32; ckk * ohw];
    for b in 0..n {
        let image = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        im2col(image, c, &g, &mut col);
        let dst = &mut out[b * k * ohw..(b + 1) * k * ohw];
        for (f, plane) in dst.chunks_mut(ohw).enumerate() {
            plane.fill(bias.data()[f]);
        }
        gemm(k, ckk, ohw, weight.data(), false, &col, false, 1.0, dst);
    }
    Ok((Tensor::new(vec![n, k, g.out_h, g.out_w], out)?, g))
}

pub struct Conv2dGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    g: &WindowGeometry,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<Conv2dGrads> {
    let (n, c, h, w) = input.dims4()?;
    let (k, _, kh, kw) = weight.dims4()?;
    let ohw = g.out_h * g.out_w;
    let ckk = c * kh * kw;
    let mut dw = vec![0.0f32; k * ckk];
    let mut db = vec![0.0f32; k];
    let mut dx = need_input.then(|| vec![0.0f32; n * c * h * w]);
    let mut col = vec![0.0f32; ckk * ohw];
    let mut dcol = vec![0.0f32; if need_input { ckk * ohw } else { 0 }];
    for b in 0..n {
        let image = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let dy = &grad_out.data()[b * k * ohw..(b + 1) * k * ohw];
        for (f, plane) in dy.chunks(ohw).enumerate() {
            db[f] += plane.iter().sum::<f32>();
        }
        im2col(image, c, g, &mut col);
        // dW += dY * col^T
        gemm(k, ohw, ckk, dy, false, &col, true, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            // dcol = W^T * dY
            gemm(ckk, k, ohw, weight.data(), true, dy, false, 0.0, &mut dcol);
            col2im(&dcol, c, g, &mut dx[b * c * h * w..(b + 1) * c * h * w]);
        }
    }
    Ok(Conv2dGrads {
        input: dx
            .map(|d| Tensor::new(input.shape().to_vec(), d))
            .transpose()?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![k], db)?,
    })
}

/// Max pooling. Returns the pooled tensor and, per output element, the flat
/// input index that won (first maximum in row-major window order).
pub fn maxpool2d(
    input: &Tensor,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if window > h || window > w {
        return Err(Error::invalid(
            "maxpool2d",
            format!("window {window} exceeds spatial extent {h}x{w}"),
        ));
    }
    let g = WindowGeometry::new("maxpool2d", (h, w), (window, window), stride, padding)?;
    let mut out = Vec::with_capacity(n * c * g.out_h * g.out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for i in 0..window {
                    let Some(y) = g.src_row(oy, i) else { continue };
                    for j in 0..window {
                        let Some(xx) = g.src_col(ox, j) else { continue };
                        let idx = base + y * w + xx;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, g.out_h, g.out_w], out)?, argmax))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    dx
}

/// Non-overlapping average pooling with a square `window` that must divide
/// both spatial extents.
pub fn avgpool2d(input: &Tensor, window: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::invalid(
            "avgpool2d",
            format!("window {window} must divide spatial extent {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / window, w / window);
    let scale = 1.0 / (window * window) as f32;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for i in 0..window {
                    let row = base + (oy * window + i) * w + ox * window;
                    acc += x[row..row + window].iter().sum::<f32>();
                }
                out.push(acc * scale);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avgpool2d_backward(input_shape: &[usize], window: usize, grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / window, w / window);
    let scale = 1.0 / (window * window) as f32;
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (plane, gplane) in grad_out.data().chunks(oh * ow).enumerate() {
        let base = plane * h * w;
        for y in 0..h {
            for x in 0..w {
                d[base + y * w + x] = gplane[(y / window) * ow + x / window] * scale;
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over `(N, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Saved forward state for the batch-norm backward rule.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub batch_stats: bool,
}

fn check_bn_params(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape(
            "batchnorm2d",
            format!(
                "gamma {:?} / beta {:?} must have {c} entries",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(())
}

fn channel_stats(input: &Tensor) -> Result<BatchStats> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let x = input.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let planes = || (0..n).map(move |b| &x[(b * c + ch) * hw..(b * c + ch + 1) * hw]);
        let m = planes().flatten().map(|&v| v as f64).sum::<f64>() / count;
        let v = planes()
            .flatten()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / count;
        mean[ch] = m as f32;
        var[ch] = v as f32;
    }
    Ok(BatchStats { mean, var })
}

/// Batch normalization. With `running = None` the batch statistics are used
/// (training) and returned; otherwise the supplied mean/variance are used.
#[allow(clippy::needless_range_loop)]
pub fn batchnorm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: Option<(&[f32], &[f32])>,
    eps: f32,
) -> Result<(Tensor, NormCache, Option<BatchStats>)> {
    let (n, c, h, w) = input.dims4()?;
    check_bn_params(c, gamma, beta)?;
    let (stats, batch) = match running {
        Some((mean, var)) => {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("running stats must have {c} entries"),
                ));
            }
            (
                BatchStats {
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                },
                false,
            )
        }
        None => (channel_stats(input)?, true),
    };
    let hw = h * w;
    let inv_std: Vec<f32> = stats
        .var
        .iter()
        .map(|&v| (1.0 / (v as f64 + eps as f64).sqrt()) as f32)
        .collect();
    let x = input.data();
    let mut xhat = vec![0.0f32; x.len()];
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (m, s) = (stats.mean[ch], inv_std[ch]);
            let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + hw {
                let xh = (x[i] - m) * s;
                xhat[i] = xh;
                out[i] = ga * xh + be;
            }
        }
    }
    let cache = NormCache {
        xhat,
        inv_std,
        batch_stats: batch,
    };
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        cache,
        batch.then_some(stats),
    ))
}

pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[allow(clippy::needless_range_loop)]
pub fn batchnorm2d_backward(
    shape: &[usize],
    gamma: &Tensor,
    cache: &NormCache,
    grad_out: &Tensor,
) -> BatchNormGrads {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (n * hw) as f64;
    let dy = grad_out.data();
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dx = vec![0.0f32; dy.len()];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sum_dy += dy[i] as f64;
                sum_dy_xhat += dy[i] as f64 * cache.xhat[i] as f64;
            }
        }
        dgamma[ch] = sum_dy_xhat as f32;
        dbeta[ch] = sum_dy as f32;
        let scale = gamma.data()[ch] as f64 * cache.inv_std[ch] as f64;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = if cache.batch_stats {
                    (scale / m * (m * dy[i] as f64 - sum_dy - cache.xhat[i] as f64 * sum_dy_xhat))
                        as f32
                } else {
                    (scale * dy[i] as f64) as f32
                };
            }
        }
    }
    let vec_t = |v: Vec<f32>| Tensor::new(vec![c], v).expect("channel vector");
    BatchNormGrads {
        input: Tensor::new(shape.to_vec(), dx).expect("same shape as input"),
        gamma: vec_t(dgamma),
        beta: vec_t(dbeta),
    }
}

fn map(input: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(
        input.shape().to_vec(),
        input.data().iter().map(|&v| f(v)).collect(),
    )
    .expect("same shape")
}

pub fn relu(input: &Tensor) -> Tensor {
    map(input, |v| v.max(0.0))
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    map(input, |v| 1.0 / (1.0 + (-v).exp()))
}

/// Row-wise softmax of an `N x C` matrix.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    let (_, c) = input.dims2().map_err(|_| {
        Error::shape(
            "softmax",
            format!("expected batch x classes, got {:?}", input.shape()),
        )
    })?;
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub fn softmax_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let c = output.shape()[1];
    let mut dx = vec![0.0f32; output.numel()];
    for ((y, dy), d) in output
        .data()
        .chunks(c)
        .zip(grad_out.data().chunks(c))
        .zip(dx.chunks_mut(c))
    {
        let dot: f32 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
        for i in 0..c {
            d[i] = y[i] * (dy[i] - dot);
        }
    }
    Tensor::new(output.shape().to_vec(), dx).expect("same shape")
}

/// Source taps for one axis of half-pixel bilinear resampling:
/// `(lower index, upper index, weight of upper)` per output position.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            (lo, hi, frac as f32)
        })
        .collect()
}

/// Bilinear resampling of every plane to `out_h x out_w`, using half-pixel
/// centres and edge clamping.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "resize_bilinear",
            "output size must be positive",
        ));
    }
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.chunks(h * w) {
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub fn resize_bilinear_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (out_h, out_w) = (grad_out.shape()[2], grad_out.shape()[3]);
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (plane, gplane) in d
        .chunks_mut(h * w)
        .zip(grad_out.data().chunks(out_h * out_w))
    {
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let g = gplane[oy * out_w + ox];
                plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * w + x0] += g * fy * (1.0 - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

pub fn upsample_bilinear2x(input: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = input.dims4()?;
    resize_bilinear(input, 2 * h, 2 * w)
}

/// `input (N x D) * weight (D x M) + bias (M)`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d) = input.dims2()?;
    let (wd, m) = weight.dims2()?;
    if wd != d || bias.numel() != m {
        return Err(Error::shape(
            "dense",
            format!(
                "input {:?}, weight {:?}, bias {:?} are incompatible",
                input.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out: Vec<f32> = bias.data().repeat(n);
    gemm(
        n,
        d,
        m,
        input.data(),
        false,
        weight.data(),
        false,
        1.0,
        &mut out,
    );
    Tensor::new(vec![n, m], out)
}

pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> DenseGrads {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let m = weight.shape()[1];
    let dy = grad_out.data();
    let mut dx = vec![0.0f32; n * d];
    gemm(n, m, d, dy, false, weight.data(), true, 0.0, &mut dx);
    let mut dw = vec![0.0f32; d * m];
    gemm(d, n, m, input.data(), true, dy, false, 0.0, &mut dw);
    let mut db = vec![0.0f32; m];
    for row in dy.chunks(m) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    DenseGrads {
        input: Tensor::new(vec![n, d], dx).expect("input shape"),
        weight: Tensor::new(vec![d, m], dw).expect("weight shape"),
        bias: Tensor::new(vec![m], db).expect("bias shape"),
    }
}

fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn add_scalar(a: &Tensor, s: f32) -> Tensor {
    map(a, |v| v + s)
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    map(a, |v| v * s)
}

/// Collapses every axis after the first.
pub fn flatten(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let rest = a.numel() / n;
    a.clone().reshape(&[n, rest]).expect("same element count")
}

pub const BCE_CLIP: f64 = 1e-7;

/// Element-mean binary cross-entropy with probabilities clipped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probs: &Tensor, targets: &Tensor) -> Result<f32> {
    if probs.shape() != targets.shape() {
        return Err(Error::shape(
            "bce_loss",
            format!("probs {:?} vs targets {:?}", probs.shape(), targets.shape()),
        ));
    }
    let total: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok((total / probs.numel() as f64) as f32)
}

pub fn bce_loss_backward(probs: &Tensor, targets: &Tensor, grad: f32) -> Tensor {
    let scale = grad as f64 / probs.numel() as f64;
    let data = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &y)| {
            let p = p as f64;
            if !(BCE_CLIP..=1.0 - BCE_CLIP).contains(&p) {
                return 0.0;
            }
            let y = y as f64;
            (scale * (-(y / p) + (1.0 - y) / (1.0 - p))) as f32
        })
        .collect();
    Tensor::new(probs.shape().to_vec(), data).expect("same shape")
}
