#![allow(dead_code)]

pub mod gradcheck;
pub mod reference;

use focusdec_core::focus::FocusParams;
use focusdec_core::model::{BaseParams, ModelConfig};
use focusdec_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 64,
        context_len: 64,
        rope_theta: 10000.0,
    }
}

/// Random weights large enough that attention patterns are far from uniform.
pub fn random_base(config: &ModelConfig, seed: u64) -> BaseParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = BaseParams::expected_shapes(config)
        .iter()
        .map(|(name, shape)| {
            if shape.len() == 1 {
                Tensor::from_fn(shape, |_| 1.0)
            } else {
                let std = if name == "tok_embed" { 1.0 } else { 0.25 };
                Tensor::randn(shape, std, &mut rng)
            }
        })
        .collect();
    BaseParams::from_tensors(config, tensors).unwrap()
}

pub fn random_focus(base: &BaseParams, seed: u64) -> FocusParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FocusParams::init_from_base(base, 0.1, &mut rng)
}

pub fn random_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}
