//! Compact ViT encoder and lightweight transformer decoder.

mod attention;
mod model;
mod params;
mod patch;
mod pos_embed;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{encoder_attention, extract_attention_map, mhsa_forward, AttentionRecord};
pub use model::{Bound, HeadSpec, ENCODER_PREFIX, DECODER_PREFIX, HEAD_PREFIX, LN_EPS};
pub use params::ParamTable;
pub use patch::{patch_layout, patchify, unpatchify, TokenSequence};
pub use pos_embed::sincos_pos_embed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
}

impl VitConfig {
    /// Desk-scale reference preset: 32px images, 8px patches, 16 tokens.
    pub fn nano() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            encoder_dim: 64,
            encoder_depth: 4,
            encoder_heads: 4,
            decoder_dim: 32,
            decoder_depth: 2,
            decoder_heads: 4,
            mlp_ratio: 4,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vit-nano" => Ok(Self::nano()),
            other => Err(Error::invalid(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: String| {
            Err(Error::Config {
                key: format!("model.{key}"),
                reason,
            })
        };
        if self.patch_size == 0 || self.image_size == 0 {
            return fail("patch_size", "image and patch sizes must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(
                "patch_size",
                format!("{} does not divide image size {}", self.patch_size, self.image_size),
            );
        }
        if self.encoder_heads == 0 || self.encoder_dim % self.encoder_heads != 0 {
            return fail(
                "encoder_heads",
                format!("{} heads do not divide dim {}", self.encoder_heads, self.encoder_dim),
            );
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return fail(
                "decoder_heads",
                format!("{} heads do not divide dim {}", self.decoder_heads, self.decoder_dim),
            );
        }
        if self.encoder_dim % 4 != 0 || self.decoder_dim % 4 != 0 {
            return fail("encoder_dim", "model widths must be divisible by 4".into());
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio", "must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per patch token before projection: `p²·3`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}
