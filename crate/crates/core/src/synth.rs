//! Synthetic data: Gauss–Markov random fields, images rendered from them,
//! constant-patch mosaics and Markov index grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codebook::{Codebook, FeatureGrid, Granularity, IndexGrid};
use crate::tensor::Tensor;

/// Lag-1 correlation of an AR(1) process with the given correlation length.
pub fn ar1_coefficient(correlation_length: f64) -> f64 {
    (-1.0 / correlation_length).exp()
}

fn ar1_filter(values: &mut [f64], stride: usize, n: usize, rho: f64) {
    let innovation = (1.0 - rho * rho).sqrt();
    for i in 1..n {
        values[i * stride] = rho * values[(i - 1) * stride] + innovation * values[i * stride];
    }
}

/// Zero-mean, unit-variance field with separable covariance
/// `ρ^|Δy| · ρ^|Δx|`, `ρ = exp(−1/L)`, one independent field per channel.
pub fn gauss_markov_field(channels: usize, h: usize, w: usize, correlation_length: f64, rng: &mut impl Rng) -> Tensor {
    let rho = ar1_coefficient(correlation_length);
    let mut t = Tensor::zeros(&[channels, h, w]);
    for v in t.data_mut().iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    let data = t.data_mut();
    for c in 0..channels {
        let plane = &mut data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            ar1_filter(&mut plane[y * w..(y + 1) * w], 1, w, rho);
        }
        for x in 0..w {
            ar1_filter(&mut plane[x..], w, h, rho);
        }
    }
    t
}

/// Feature grid of independent Gauss–Markov channels scaled by `scale`.
pub fn gauss_markov_features(d: usize, h: usize, w: usize, correlation_length: f64, scale: f64, seed: u64) -> FeatureGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = gauss_markov_field(d, h, w, correlation_length, &mut rng).map(|v| v * scale);
    FeatureGrid::new(Granularity::Fine, t).expect("finite field")
}

/// Features that sit exactly on codebook rows chosen uniformly at random.
pub fn uniform_index_features(cb: &Codebook, h: usize, w: usize, seed: u64) -> FeatureGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cb.d();
    let mut t = Tensor::zeros(&[d, h, w]);
    for loc in 0..h * w {
        let k = rng.gen_range(0..cb.k());
        for c in 0..d {
            t.data_mut()[c * h * w + loc] = cb.row(k)[c] as f64;
        }
    }
    FeatureGrid::new(Granularity::Fine, t).expect("finite features")
}

/// Brightness per unit of field amplitude in rendered images.
pub const IMAGE_CONTRAST: f64 = 0.15;

/// `3 × H × W` image in `[0, 1]`: a shared luminance field plus a weaker
/// per-channel field, both with the same correlation length.
pub fn gauss_markov_image(h: usize, w: usize, correlation_length: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let luma = gauss_markov_field(1, h, w, correlation_length, &mut rng);
    let chroma = gauss_markov_field(3, h, w, correlation_length, &mut rng);
    let mut img = Tensor::zeros(&[3, h, w]);
    let n = h * w;
    for c in 0..3 {
        for i in 0..n {
            let v = 0.8 * luma.data()[i] + 0.6 * chroma.data()[c * n + i];
            img.data_mut()[c * n + i] = (0.5 + IMAGE_CONTRAST * v).clamp(0.0, 1.0);
        }
    }
    img
}

/// Mosaic of `patch × patch` blocks, each filled with one of `colors`.
pub fn constant_patch_mosaic(h: usize, w: usize, patch: usize, colors: &[[f64; 3]], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bh, bw) = (h.div_ceil(patch), w.div_ceil(patch));
    let choice: Vec<usize> = (0..bh * bw).map(|_| rng.gen_range(0..colors.len())).collect();
    let mut img = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                img.data_mut()[(c * h + y) * w + x] = colors[choice[(y / patch) * bw + x / patch]][c];
            }
        }
    }
    img
}

/// Index grid whose rows are first-order Markov chains: every symbol has
/// `successors` distinct equally likely successors, so the conditional
/// entropy is `log₂(successors)` bits. Each row starts uniformly.
pub fn markov_rows(h: usize, w: usize, k: usize, successors: usize, seed: u64) -> IndexGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table: Vec<Vec<u32>> = (0..k)
        .map(|_| rand::seq::index::sample(&mut rng, k, successors).into_iter().map(|v| v as u32).collect())
        .collect();
    let mut idx = Vec::with_capacity(h * w);
    for _ in 0..h {
        let mut s = rng.gen_range(0..k as u32);
        idx.push(s);
        for _ in 1..w {
            s = table[s as usize][rng.gen_range(0..successors)];
            idx.push(s);
        }
    }
    IndexGrid::new(Granularity::Fine, h, w, idx).expect("grid shape")
}

/// Sample lag-1 autocorrelation along rows, pooled over all channels.
pub fn row_autocorrelation(t: &Tensor) -> f64 {
    let (c, h, w) = t.dims3();
    let n = (c * h * w) as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut pairs = 0usize;
    for ch in 0..c {
        for y in 0..h {
            for x in 1..w {
                let a = t.data()[(ch * h + y) * w + x - 1] - mean;
                let b = t.data()[(ch * h + y) * w + x] - mean;
                cov += a * b;
                pairs += 1;
            }
        }
    }
    cov / pairs as f64 / var
}
