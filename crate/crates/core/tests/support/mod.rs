//! Reference kernels in f64 written directly from their definitions, plus
//! the finite-difference harness used by the gradient checks.
#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ranet::data::{Label, LabeledImage};
use ranet::engine::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), to_f32(v)).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

/// Output size and leading pad for one axis. Same padding yields
/// `ceil(n / stride)` and puts any odd pad at the end.
pub fn axis(n: usize, k: usize, stride: usize, same: bool) -> (usize, usize) {
    if same {
        let out = n.div_ceil(stride);
        let total = ((out - 1) * stride + k).saturating_sub(n);
        (out, total / 2)
    } else {
        ((n - k) / stride + 1, 0)
    }
}

/// Direct cross-correlation: `x` is N x C x H x W, `w` is K x C x k x k.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    [n, c, h, wd]: [usize; 4],
    w: &[f64],
    kout: usize,
    k: usize,
    b: &[f64],
    stride: usize,
    same: bool,
) -> (Vec<f64>, [usize; 4]) {
    let (oh, pt) = axis(h, k, stride, same);
    let (ow, pl) = axis(wd, k, stride, same);
    let mut out = vec![0.0; n * kout * oh * ow];
    for ni in 0..n {
        for ko in 0..kout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[ko];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pt as isize;
                                let ix = (ox * stride + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((ko * c + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * kout + ko) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, kout, oh, ow])
}

/// Window maximum, ignoring padded positions.
pub fn maxpool(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: usize,
    stride: usize,
    same: bool,
) -> (Vec<f64>, [usize; 4]) {
    let (oh, pt) = axis(h, k, stride, same);
    let (ow, pl) = axis(w, k, stride, same);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            best = best.max(plane[iy as usize * w + ix as usize]);
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    (out, [n, c, oh, ow])
}

pub fn avgpool(x: &[f64], [n, c, h, w]: [usize; 4], k: usize) -> (Vec<f64>, [usize; 4]) {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for y in oy * k..(oy + 1) * k {
                    for xx in ox * k..(ox + 1) * k {
                        s += plane[y * w + xx];
                    }
                }
                out.push(s / (k * k) as f64);
            }
        }
    }
    (out, [n, c, oh, ow])
}

/// Training-mode batch norm with biased batch variance.
pub fn batchnorm(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let m = (n * h * w) as f64;
    let idx = |ni: usize, ci: usize, p: usize| (ni * c + ci) * h * w + p;
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        let mut mean = 0.0;
        for ni in 0..n {
            for p in 0..h * w {
                mean += x[idx(ni, ci, p)];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for ni in 0..n {
            for p in 0..h * w {
                var += (x[idx(ni, ci, p)] - mean).powi(2);
            }
        }
        var /= m;
        for ni in 0..n {
            for p in 0..h * w {
                let i = idx(ni, ci, p);
                out[i] = gamma[ci] * (x[i] - mean) / (var + eps).sqrt() + beta[ci];
            }
        }
    }
    out
}

/// Half-pixel bilinear resampling written as a tent filter over the clamped
/// source coordinate.
pub fn resize(x: &[f64], [n, c, h, w]: [usize; 4], oh: usize, ow: usize) -> Vec<f64> {
    let source = |o: usize, out: usize, inp: usize| -> f64 {
        (((o as f64) + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64)
    };
    let tent = |s: f64, i: usize| (1.0 - (s - i as f64).abs()).max(0.0);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks(h * w) {
        for oy in 0..oh {
            let sy = source(oy, oh, h);
            for ox in 0..ow {
                let sx = source(ox, ow, w);
                let mut acc = 0.0;
                for iy in 0..h {
                    for ix in 0..w {
                        acc += tent(sy, iy) * tent(sx, ix) * plane[iy * w + ix];
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

pub fn dense(x: &[f64], n: usize, d: usize, w: &[f64], m: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = b[j];
            for k in 0..d {
                acc += x[i * d + k] * w[k * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
}

pub fn softmax(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .flat_map(|row| {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(move |v| v.exp() / total)
        })
        .collect()
}

pub fn bce(p: &[f64], y: &[f64]) -> f64 {
    let clip = 1e-7;
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(clip, 1.0 - clip);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / p.len() as f64
}

/// Two-class toy set: COVID images are bright on the left half, Normal on
/// the right, with uniform noise of `noise` on every pixel.
pub fn bright_halves(n: usize, size: usize, noise: f64, seed: u64) -> Vec<LabeledImage> {
    let mut rng = rng(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 {
                Label::Covid
            } else {
                Label::Normal
            };
            let bright_left = label == Label::Covid;
            let image = Tensor::from_fn(&[3, size, size], |j| {
                let left = j % size < size / 2;
                let base = if left == bright_left { 0.9 } else { 0.1 };
                (base + rng.gen_range(-noise..=noise)) as f32
            });
            LabeledImage { image, label }
        })
        .collect()
}

/// AUC by comparing every positive/negative pair, ties worth one half.
/// Class 0 is positive.
pub fn pairwise_auc(scores: &[f32], labels: &[usize]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0f64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] != 0 || labels[j] == 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}
