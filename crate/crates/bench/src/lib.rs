//! Fixtures shared by the benchmarks.

use hvqc::codebook::{Codebook, IndexGrid};
use hvqc::hyperprior::{HyperConfig, HyperParams, RateSample};
use hvqc::pipeline::{Model, ModelConfig};
use hvqc::synth;
use hvqc::tensor::Tensor;

/// Uniformly random `side × side` index grid over `k` symbols.
pub fn uniform_grid(side: usize, k: usize, seed: u64) -> IndexGrid {
    let cb = Codebook::random_normal(k, 1, 1.0, seed).expect("codebook");
    let f = synth::uniform_index_features(&cb, side, side, seed);
    hvqc::codebook::quantize(&f, &cb).expect("quantize")
}

/// Gauss-Markov features quantized with a random codebook, plus an
/// untrained hyperprior of matching depth.
pub fn markov_sample(side: usize, k: usize, d: usize, seed: u64) -> (Codebook, HyperParams, RateSample) {
    let cb = Codebook::random_normal(k, d, 1.0, seed).expect("codebook");
    let f = synth::gauss_markov_features(d, side, side, 4.0, 1.0, seed + 1);
    let sample = RateSample::new(f, &cb).expect("sample");
    (cb, HyperParams::init(HyperConfig::new(d), seed + 2), sample)
}

pub fn model_and_image(side: usize, k: usize, seed: u64) -> (Model, Tensor) {
    let model = Model::init(ModelConfig::new(k, 4), seed).expect("model");
    (model, synth::gauss_markov_image(side, side, 8.0, seed + 1))
}
