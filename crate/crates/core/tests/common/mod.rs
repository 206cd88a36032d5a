#![allow(dead_code)]

use art_head::config::RunConfig;
use art_head::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A model small enough to train for a few steps inside a unit test.
pub fn tiny_config() -> RunConfig {
    let c = RunConfig::from_json(
        r#"{"synth": {"t": 3, "h": 4, "w": 4, "c": 8},
            "model": {"t": 3, "h": 4, "w": 4, "c": 8, "d": 8},
            "bank": {"text_dim": 6, "n_prom": 2},
            "data": {"n_train": 16, "n_test": 8},
            "train": {"batch_size": 8, "max_steps": 4}}"#,
    )
    .unwrap();
    c.validate().unwrap();
    c
}

pub fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| rng.sample(StandardNormal))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
