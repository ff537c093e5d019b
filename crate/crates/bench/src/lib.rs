//! Shared fixtures for the criterion benchmarks.

use ndarray::Array4;
use tvae::model::{ModelConfig, PriorSettings};
use tvae::training::VariantId;
use tvae::TargetVae;

/// A small P4 model at MNIST-like resolution, deterministic weights.
pub fn bench_model(h: usize, w: usize, channels: usize, kernel: usize) -> TargetVae {
    let mut c = ModelConfig::new(VariantId::FullP4, 2, h, w);
    c.first_kernel_size = kernel;
    c.channels = channels;
    c.generator.hidden_units = 4 * channels;
    c.generator.n_freq = 32;
    TargetVae::new(c, PriorSettings::default(), 42).expect("bench model")
}

/// Deterministic pseudo-image batch in [0, 1].
pub fn bench_images(n: usize, h: usize, w: usize) -> Array4<f64> {
    Array4::from_shape_fn((n, 1, h, w), |(b, _, i, j)| {
        let v = ((b * 31 + i * 7 + j * 13) % 97) as f64 / 96.0;
        v * v
    })
}
