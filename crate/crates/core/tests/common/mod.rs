#![allow(dead_code)]

use steervec_core::data::{generate, BiasConfig, GroupedDataset};
use steervec_core::model::{init_params, ModelConfig, ModelParams};

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 16,
        seq_len: 8,
        n_classes: 2,
        seed,
    }
}

pub fn small_model(seed: u64) -> ModelParams<f32> {
    init_params(&small_config(seed)).unwrap()
}

pub fn small_data(seed: u64, n: usize) -> GroupedDataset {
    let cfg = BiasConfig {
        n_train: n,
        n_val: 4,
        n_test: 4,
        vocab_size: 16,
        seq_len: 8,
        seed,
        ..BiasConfig::default()
    };
    generate(&cfg).unwrap()
}

/// `x − r (rᵀx) / ‖r‖²` in double precision.
pub fn ablate_oracle(x: &[f32], r: &[f32]) -> Vec<f64> {
    let rr: f64 = r.iter().map(|&v| v as f64 * v as f64).sum();
    let rx: f64 = r.iter().zip(x).map(|(&a, &b)| a as f64 * b as f64).sum();
    x.iter()
        .zip(r)
        .map(|(&xi, &ri)| xi as f64 - ri as f64 * rx / rr)
        .collect()
}

pub fn norm64(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max)
}
