//! Compact encoder-decoder transformer whose cross-attention takes an external
//! softmax temperature.

mod checkpoint;
mod layers;
mod params;
mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, FORMAT_VERSION};
pub use layers::{tempered_softmax, AttentionOutput};
pub use params::{Attention, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, ModelParams, Tensor};
pub use transformer::{
    cross_entropy, decode, encode, forward, logits_for, loss_and_gradients, shift_right, DecoderState, EncoderState,
    Logits, DECODER_START_ID,
};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("logits must be finite")]
    NonFiniteLogits,
    #[error("sequence of length {len} exceeds max_positions {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("empty sequence")]
    EmptySequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Validates `cfg` and draws fresh seeded parameters.
pub fn init_model<T: crate::tensor::Float>(cfg: &ModelConfig) -> Result<ModelParams<T>, ModelError> {
    cfg.validate()?;
    Ok(ModelParams::init(cfg))
}
