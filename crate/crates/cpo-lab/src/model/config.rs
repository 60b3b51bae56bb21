//! Model shape configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the decoder-only transformer. All sizes are in scalars, not
/// bytes; the model runs entirely in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Vocabulary size including the reserved EOS id 0. At least 2.
    pub vocab_size: usize,
    /// Residual stream width.
    pub d_model: usize,
    /// Number of decoder blocks.
    pub n_layers: usize,
    /// Attention heads per block; must divide `d_model`.
    pub n_heads: usize,
    /// Longest sequence (prefix plus continuation) the model accepts.
    pub max_context: usize,
}

impl ModelConfig {
    /// Desk-scale default shape: small enough that full training runs finish
    /// on one CPU core, large enough that preference fine-tuning has
    /// measurable effects.
    pub fn desk_default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_context: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig(
                "vocab_size must be at least 2 (EOS plus one content token)".into(),
            ));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_context < 2 {
            return Err(Error::InvalidConfig(
                "d_model, n_layers, n_heads must be positive and max_context at least 2".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the MLP hidden layer (the usual 4x expansion).
    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }
}
