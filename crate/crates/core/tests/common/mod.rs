//! Helpers shared by the integration tests: independent metric oracles, a
//! plain-loop model forward, and fixtures.
#![allow(dead_code)]

pub mod naive;
pub mod oracles;

use aesvl::model::ModelConfig;
use aesvl_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        dim: 8,
        n_heads: 2,
        encoder_layers: 1,
        unimodal_layers: 1,
        multimodal_layers: 1,
        mlp_dim: 16,
        generative_pool_queries: 2,
        vocab_size: 12,
        max_text_length: 8,
    }
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}
