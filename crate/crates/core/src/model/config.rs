use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Architecture of the miniature masked autoencoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub decoder_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Reconstruct per-patch normalized pixels instead of raw values.
    pub norm_pix_loss: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            decoder_dim: 48,
            encoder_layers: 4,
            decoder_layers: 2,
            heads: 4,
            mlp_ratio: 2,
            norm_pix_loss: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(invalid(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err(invalid("channels and mlp_ratio must be positive"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) || !self.decoder_dim.is_multiple_of(self.heads)
        {
            return Err(invalid(format!(
                "embed_dim {} and decoder_dim {} must be divisible by heads {}",
                self.embed_dim, self.decoder_dim, self.heads
            )));
        }
        // 2-D sin-cos positional encoding splits each width into four bands
        if !self.embed_dim.is_multiple_of(4) || !self.decoder_dim.is_multiple_of(4) {
            return Err(invalid("embed_dim and decoder_dim must be multiples of 4"));
        }
        if self.encoder_layers == 0 {
            return Err(invalid("encoder_layers must be at least 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Tokens per image.
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per patch row (`P * P * channels`).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Grid position `(row, col)` of each token.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        let g = self.grid();
        (0..g * g).map(|i| (i / g, i % g)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_desk_scale() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_tokens(), 64);
        assert_eq!(c.patch_dim(), 48);
    }

    #[test]
    fn rejects_indivisible() {
        let c = ModelConfig {
            image_size: 30,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn vit_base_token_count() {
        let c = ModelConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            decoder_dim: 512,
            heads: 16,
            ..Default::default()
        };
        c.validate().unwrap();
        assert_eq!(c.num_tokens(), 196);
    }
}
