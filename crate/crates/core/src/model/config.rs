use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Hidden width D.
    pub dim: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub unimodal_layers: usize,
    pub multimodal_layers: usize,
    pub mlp_dim: usize,
    pub generative_pool_queries: usize,
    pub vocab_size: usize,
    pub max_text_length: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            dim: 64,
            n_heads: 4,
            encoder_layers: 2,
            unimodal_layers: 2,
            multimodal_layers: 2,
            mlp_dim: 256,
            generative_pool_queries: 8,
            vocab_size: 512,
            max_text_length: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("dim", self.dim),
            ("n_heads", self.n_heads),
            ("mlp_dim", self.mlp_dim),
            ("generative_pool_queries", self.generative_pool_queries),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return bad(format!("dim {} not divisible by n_heads {}", self.dim, self.n_heads));
        }
        if self.vocab_size <= crate::tokenizer::RESERVED.len() {
            return bad(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.max_text_length < 2 {
            return bad("max_text_length must be at least 2".into());
        }
        Ok(())
    }

    /// Number of patches K.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, m, v) = (self.dim, self.mlp_dim, self.vocab_size);
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let mlp = 2 * d * m + m + d;
        let block = 2 * ln + attn + mlp;
        let multi_block = 3 * ln + 2 * attn + mlp;
        let image = self.patch_dim() * d + d + self.num_patches() * d + self.encoder_layers * block + ln;
        let poolers = (1 + self.generative_pool_queries) * d + 2 * attn;
        let text = v * d
            + self.max_text_length * d
            + self.unimodal_layers * block
            + ln
            + d * d
            + d
            + self.multimodal_layers * multi_block
            + ln
            + d * v
            + v;
        image + poolers + text + 1
    }
}
