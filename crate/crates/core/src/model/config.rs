use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry and width of the encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub encoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub num_classes: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl PatchConfig {
    /// ViT-B/16 at 224 px with the 8-block, 512-wide, 16-head decoder.
    pub fn vit_base(num_classes: usize) -> Self {
        Self {
            image_height: 224,
            image_width: 224,
            patch_size: 16,
            embed_dim: 768,
            num_heads: 12,
            encoder_depth: 12,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            num_classes,
            mlp_ratio: 4,
        }
    }

    /// CPU-sized model for 64×64 inputs with 8×8 patches (N = 64).
    pub fn desk(num_classes: usize) -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            embed_dim: 48,
            num_heads: 3,
            encoder_depth: 3,
            decoder_dim: 32,
            decoder_depth: 1,
            decoder_heads: 2,
            num_classes,
            mlp_ratio: 4,
        }
    }

    pub fn grid_height(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_width(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_height() * self.grid_width()
    }

    /// Values per flattened patch, `p²·3`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: field.to_string(),
                reason,
            })
        };
        if self.patch_size == 0 {
            return bad("patch_size", "must be positive".into());
        }
        if !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return Err(Error::Dimension(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.num_patches() == 0 {
            return bad("image_height", "image must contain at least one patch".into());
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(
                "num_heads",
                format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads),
            );
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return bad(
                "decoder_heads",
                format!(
                    "decoder_dim {} not divisible by {} heads",
                    self.decoder_dim, self.decoder_heads
                ),
            );
        }
        // 2-D sine-cosine embeddings split the width into four equal bands.
        if !self.embed_dim.is_multiple_of(4) {
            return bad("embed_dim", "must be a multiple of 4".into());
        }
        if !self.decoder_dim.is_multiple_of(4) {
            return bad("decoder_dim", "must be a multiple of 4".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be positive".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be positive".into());
        }
        Ok(())
    }
}
