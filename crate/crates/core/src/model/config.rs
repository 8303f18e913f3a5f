use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Nonlinearity;

/// Shape and initialisation settings of a [`super::ToyTransformer`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub nonlinearity: Nonlinearity,
    pub final_norm: bool,
    /// Adds a bias to every FFN down-projection. Off by default.
    pub ffn_bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            d_model: 32,
            d_ff: 64,
            vocab_size: 64,
            num_heads: 2,
            max_seq_len: 32,
            nonlinearity: Nonlinearity::Silu,
            final_norm: true,
            ffn_bias: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("num_heads", self.num_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    /// Knowledge output nodes per layer (rows of `W_down`).
    pub fn nodes_per_layer(&self) -> usize {
        self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}
