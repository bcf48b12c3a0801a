use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and hyperparameters of the prompt-conditioned ViT encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Pixels per image side.
    pub image_size: usize,
    pub channels: usize,
    /// Pixels per patch side.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    /// Tokens per class prompt block.
    pub prompt_tokens: usize,
    pub lora_rank: usize,
    /// LoRA scale `s`; the adapter contributes `(s / r)·(x·A)·B`.
    pub lora_scale: f64,
    /// Add a frozen positional embedding to each prompt slot.
    #[serde(default = "default_prompt_positions")]
    pub prompt_positions: bool,
    /// Standard deviation of the truncated-normal backbone initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_prompt_positions() -> bool {
    false
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
            num_classes: 6,
            prompt_tokens: 2,
            lora_rank: 4,
            lora_scale: 4.0,
            prompt_positions: default_prompt_positions(),
            init_std: default_init_std(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("prompt_tokens", self.prompt_tokens),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.lora_rank > self.embed_dim {
            return Err(Error::Config(format!(
                "lora_rank {} exceeds embed_dim {}",
                self.lora_rank, self.embed_dim
            )));
        }
        if !(self.lora_scale > 0.0 && self.lora_scale.is_finite()) {
            return Err(Error::Config("lora_scale must be positive".into()));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || self.mlp_hidden() == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Internal sequence length with `blocks` prompt blocks prepended.
    pub fn sequence_len(&self, blocks: usize) -> usize {
        1 + blocks * self.prompt_tokens + self.num_patches()
    }
}
