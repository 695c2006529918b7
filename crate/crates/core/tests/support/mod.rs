//! Brute-force reference implementations and fixtures shared by the
//! integration tests. Every oracle here is written directly from the
//! definition of the quantity it computes, without sharing code with the
//! library.

#![allow(dead_code)]

use objrel::episodes::{generate_synthetic, sample_episode, Dataset, Episode, Rotation, Split};
use objrel::Tensor;
use rand::Rng;
use statrs::statistics::Statistics;

/// Largest relative gradient error allowed for a single primitive.
pub const PRIMITIVE_GRAD_TOL: f64 = 1e-6;
/// Largest relative gradient error allowed through the full scoring path.
pub const COMPOSITION_GRAD_TOL: f64 = 1e-4;
/// Largest absolute difference from a brute-force oracle.
pub const ORACLE_TOL: f64 = 1e-9;
/// Random instances compared per oracle.
pub const ORACLE_INSTANCES: usize = 120;
pub const CI_Z: f64 = 1.96;

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "oracle length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Zero-padded cross-correlation of an `h×w×cin` image with a
/// `k×k×cin×cout` kernel.
pub fn conv2d(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    kernel: &[f64],
    (k, cout): (usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        for ci in 0..cin {
                            let pixel = x[(iy as usize * w + ix as usize) * cin + ci];
                            let weight = kernel[((ky * k + kx) * cin + ci) * cout + co];
                            acc += pixel * weight;
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Window maxima (`max == true`) or means over an `h×w×c` image.
pub fn pool(x: &[f64], (h, w, c): (usize, usize, usize), k: usize, stride: usize, max: bool) -> Vec<f64> {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let window: Vec<f64> = (0..k * k)
                    .map(|i| x[((oy * stride + i / k) * w + ox * stride + i % k) * c + ch])
                    .collect();
                out.push(if max {
                    window.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    window.iter().sum::<f64>() / window.len() as f64
                });
            }
        }
    }
    out
}

/// `x[n×i] · w[i×o] + b[o]`.
pub fn dense(x: &[f64], n: usize, w: &[f64], (i, o): (usize, usize), b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * o);
    for r in 0..n {
        for col in 0..o {
            let dot: f64 = (0..i).map(|t| x[r * i + t] * w[t * o + col]).sum();
            out.push(dot + b[col]);
        }
    }
    out
}

/// Mean of `−[y ln s + (1 − y) ln(1 − s)]` over `(score, target)` pairs.
pub fn pairwise_loss(pairs: &[(f64, f64)]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|&(s, y)| -(y * s.ln() + (1.0 - y) * (1.0 - s).ln()))
        .sum();
    total / pairs.len() as f64
}

/// Column sums of a row-major `rows×cols` matrix.
pub fn column_sums(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|c| (0..rows).map(|r| m[r * cols + c]).sum())
        .collect()
}

/// Element-wise mean of equally long vectors.
pub fn elementwise_mean(xs: &[Vec<f64>]) -> Vec<f64> {
    (0..xs[0].len())
        .map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / xs.len() as f64)
        .collect()
}

/// Normal-approximation 95% interval from the sample standard deviation.
pub fn confidence_interval(values: &[f64]) -> (f64, f64) {
    let mean = values.mean();
    let sd = values.std_dev();
    (mean, CI_Z * sd / (values.len() as f64).sqrt())
}

/// The synthetic glyph set with the standard 6/2/2 class split, each class
/// expanded into its four rotations and standardized on the training split.
pub fn synthetic_benchmark(size: usize, seed: u64) -> Dataset {
    let ds = generate_synthetic(10, 20, size, seed)
        .unwrap()
        .assign_splits(6, 2, 2)
        .unwrap()
        .with_rotation_classes(&Rotation::ALL)
        .unwrap();
    let stats = ds.training_stats().unwrap();
    ds.standardized(&stats).unwrap()
}

/// A standardized 2-way 1-shot episode with one query per class.
pub fn micro_episode(seed: u64) -> Episode {
    let ds = generate_synthetic(2, 2, 16, seed).unwrap();
    let ds = ds.standardized(&ds.training_stats().unwrap()).unwrap();
    sample_episode(&ds.split(Split::Train), 2, 1, 1, seed).unwrap()
}
