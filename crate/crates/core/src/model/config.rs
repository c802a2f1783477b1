use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::Activation;

/// Side length of the square spectrogram the models consume.
pub const INPUT_SIZE: usize = 128;
/// Side length of one square patch.
pub const PATCH: usize = 16;
/// Patches per side of the grid.
pub const GRID: usize = INPUT_SIZE / PATCH;
pub const NUM_PATCHES: usize = GRID * GRID;
/// Patch tokens plus the CLS token.
pub const SEQ_LEN: usize = NUM_PATCHES + 1;
pub const PATCH_PIXELS: usize = PATCH * PATCH;
/// Hidden width of the downstream classification head.
pub const HEAD_HIDDEN: usize = 256;

/// Transformer shape: embedding width, depth, MLP expansion and activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub expansion: usize,
    pub activation: Activation,
    pub heads: usize,
}

impl ModelConfig {
    /// Head count follows `max(1, d / 64)`.
    pub fn new(embed_dim: usize, num_layers: usize, expansion: usize, activation: Activation) -> Self {
        Self { embed_dim, num_layers, expansion, activation, heads: (embed_dim / 64).max(1) }
    }

    /// Parent-family shape: GELU, expansion 4.
    pub fn parent(embed_dim: usize, num_layers: usize) -> Self {
        Self::new(embed_dim, num_layers, 4, Activation::Gelu)
    }

    /// Child-family shape: ReLU.
    pub fn child(embed_dim: usize, num_layers: usize, expansion: usize) -> Self {
        Self::new(embed_dim, num_layers, expansion, Activation::Relu)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_layers == 0 || self.expansion == 0 {
            bail!(Config, "embed_dim, num_layers and expansion must all be ≥ 1: {self:?}");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            bail!(Config, "embed_dim {} not divisible by {} heads", self.embed_dim, self.heads);
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.embed_dim * self.expansion
    }

    /// Closed-form encoder-block parameter count `L·[(4+2f)·d² + (9+f)·d]`.
    pub fn block_params(&self) -> usize {
        let (d, f) = (self.embed_dim, self.expansion);
        self.num_layers * ((4 + 2 * f) * d * d + (9 + f) * d)
    }
}

/// What [`count_params`](crate::model::Backbone::count_params) covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountScope {
    /// Encoder blocks only.
    Blocks,
    /// Every trainable tensor of the model, heads included.
    Full,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_rule() {
        assert_eq!(ModelConfig::parent(192, 6).heads, 3);
        assert_eq!(ModelConfig::child(64, 2, 1).heads, 1);
        assert_eq!(ModelConfig::child(16, 2, 1).heads, 1);
        assert_eq!(ModelConfig::parent(384, 4).heads, 6);
    }

    #[test]
    fn block_formula_reference_values() {
        assert_eq!(ModelConfig::child(64, 2, 1).block_params(), 50_432);
        assert_eq!(ModelConfig::child(64, 4, 1).block_params(), 100_864);
        assert_eq!(ModelConfig::child(1, 1, 1).block_params(), 16);
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(ModelConfig::child(0, 2, 1).validate().is_err());
        assert!(ModelConfig::child(64, 0, 1).validate().is_err());
        let mut c = ModelConfig::child(64, 2, 1);
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
