//! Shared fixtures for the benchmarks.

use splitvit::tensor::Tensor;
use splitvit::vit::VitConfig;

/// Deterministic pseudo-random activations of the default model's shape.
pub fn activations(batch: usize) -> Tensor {
    let cfg = VitConfig::default();
    let (n, d) = (cfg.tokens(), cfg.dim);
    let data = (0..batch * n * d)
        .map(|i| ((i as f64 * 0.618_033_988_75).fract() - 0.5) * 2.0)
        .collect();
    Tensor::new(vec![batch, n, d], data).expect("shape matches data")
}

/// Class-token scores that favour early tokens.
pub fn scores(batch: usize) -> Tensor {
    let n = VitConfig::default().tokens();
    let data = (0..batch * n).map(|i| 1.0 / (1 + i % n) as f64).collect();
    Tensor::new(vec![batch, n], data).expect("shape matches data")
}
