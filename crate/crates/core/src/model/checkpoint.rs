//! Checkpoint file layout:
//!
//! ```text
//! {header json}\n
//! token 0\n
//! token 1\n
//! ...
//! token V-1\n
//! <raw little-endian f32 blob, tensors in manifest order>
//! ```
//!
//! The header carries the format version, model config, parameter manifest,
//! training metadata and a SHA-256 of the blob.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ModelConfig, ModelError, ModelParams};
use crate::taskbuilder::PromptStyle;
use crate::tokenizer::{TokenizerError, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint checksum mismatch: header says {expected}, blob hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("checkpoint vocabulary: {0}")]
    Vocabulary(#[from] TokenizerError),
    #[error("checkpoint config: {0}")]
    Config(#[from] ModelError),
}

/// Training-time settings needed again at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub label: String,
    pub prompt_style: PromptStyle,
    pub max_input_len: usize,
    pub lts: bool,
    pub tau_start: f64,
    /// Temperature at the end of training; the default at inference.
    pub tau_end: f64,
}

impl CheckpointMeta {
    /// The cross-attention temperature the model last trained under.
    pub fn inference_tau(&self) -> f64 {
        if self.lts {
            self.tau_end
        } else {
            1.0
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    vocab_size: usize,
    manifest: Vec<(String, Vec<usize>)>,
    blob_bytes: usize,
    blob_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams<f32>,
    pub meta: CheckpointMeta,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::with_capacity(self.params.num_scalars() * 4);
        for t in self.params.tensors() {
            for x in &t.data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            meta: self.meta.clone(),
            vocab_size: self.vocab.size(),
            manifest: self.params.manifest(),
            blob_bytes: blob.len(),
            blob_sha256: sha256_hex(&blob),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for tok in self.vocab.tokens() {
            out.extend_from_slice(tok.as_bytes());
            out.push(b'\n');
        }
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut rest = bytes;
        let mut next_line = || -> Result<&str, CheckpointError> {
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| CheckpointError::Format("truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|e| CheckpointError::Format(e.to_string()))?;
            rest = &rest[nl + 1..];
            Ok(line)
        };
        let header: Header =
            serde_json::from_str(next_line()?).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!("unsupported format version {}", header.format_version)));
        }
        let mut tokens = Vec::with_capacity(header.vocab_size);
        for _ in 0..header.vocab_size {
            tokens.push(next_line()?.to_string());
        }
        let blob = rest;
        let actual = sha256_hex(blob);
        if blob.len() != header.blob_bytes || actual != header.blob_sha256 {
            return Err(CheckpointError::Checksum { expected: header.blob_sha256, actual });
        }
        let vocab = Vocabulary::from_tokens(tokens)?;
        header.config.validate()?;
        if header.config.vocab_size != vocab.size() {
            return Err(CheckpointError::Format(format!(
                "config vocab_size {} but {} tokens listed",
                header.config.vocab_size,
                vocab.size()
            )));
        }
        let mut params = ModelParams::<f32>::zeros(&header.config);
        if params.manifest() != header.manifest {
            return Err(CheckpointError::Format("parameter manifest does not match the model config".into()));
        }
        if params.num_scalars() * 4 != blob.len() {
            return Err(CheckpointError::Format("blob size does not match the manifest".into()));
        }
        let mut chunks = blob.chunks_exact(4);
        for t in params.tensors_mut() {
            for x in t.data.iter_mut() {
                let c = chunks.next().expect("size checked");
                *x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        Ok(Checkpoint { config: header.config, vocab, params, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::from_texts(["alpha beta gamma ."], 1);
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 2,
            d_ff: 16,
            vocab_size: vocab.size(),
            max_positions: 12,
            dropout_rate: 0.1,
            init_seed: 9,
        };
        let params = init_model(&config).unwrap();
        let meta = CheckpointMeta {
            label: "t".into(),
            prompt_style: PromptStyle::Connected,
            max_input_len: 12,
            lts: true,
            tau_start: 1.0,
            tau_end: 0.7,
        };
        Checkpoint { config, vocab, params, meta }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let text_part = String::from_utf8_lossy(&bytes[..200]);
        assert!(text_part.starts_with("{\"format_version\":1"));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Checksum { .. })));
        let truncated = &bytes[..bytes.len() - 4];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(CheckpointError::Checksum { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"garbage"), Err(CheckpointError::Format(_))));
    }
}
