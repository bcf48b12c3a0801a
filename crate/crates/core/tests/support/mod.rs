//! Shared helpers for integration tests.

#![allow(dead_code)]

pub mod gradcheck;
pub mod stats;

use pfgt::data::{generate_synthetic, Splits, SyntheticSpec};
use pfgt::encoder::EncoderConfig;

/// A few-hundred-parameter encoder for fast end-to-end tests.
pub fn tiny_encoder(classes: usize) -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 1.0,
        num_classes: classes,
        prompt_tokens: 1,
        lora_rank: 2,
        ..Default::default()
    }
}

pub fn tiny_data(classes: usize, per_class: usize, seed: u64) -> Splits {
    generate_synthetic(&SyntheticSpec {
        num_classes: classes,
        samples_per_class: per_class,
        image_size: 8,
        noise_std: 0.1,
        seed,
    })
    .unwrap()
}
