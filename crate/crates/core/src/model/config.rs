use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_gat_layers: usize,
    pub ffn_dim: usize,
    /// Relative positions are clipped to `[-k_clip, k_clip]`.
    pub k_clip: usize,
    pub dropout: f64,
    pub max_code_len: usize,
    pub max_summary_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_gat_layers: 2,
            ffn_dim: 256,
            k_clip: 16,
            dropout: 0.1,
            max_code_len: 150,
            max_summary_len: 30,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_model < 2 {
            return bad("d_model must be at least 2");
        }
        if self.k_clip < 1 {
            return bad("k_clip must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.ffn_dim == 0 || self.max_code_len == 0 || self.max_summary_len == 0 {
            return bad("ffn_dim, max_code_len and max_summary_len must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
