//! Beam-search generation and extraction of (grounding, response) pairs.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dialogue, Document};
use crate::model::{decode, encode, logits_for, ModelConfig, ModelError, ModelParams, DECODER_START_ID};
use crate::taskbuilder::{build_instance, parse_output, ParseError, PromptStyle, TaskError, TaskKind};
use crate::tokenizer::{ids, Vocabulary};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid beam config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("prediction file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("prediction file line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Generated tokens, EOS included.
    pub max_output_len: usize,
    /// Final ranking divides the score by `len^length_penalty`; 0 disables it.
    pub length_penalty: f64,
    pub inference_tau: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam_size: 2, max_output_len: 128, length_penalty: 0.0, inference_tau: 1.0 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::InvalidConfig("beam_size must be at least 1".into()));
        }
        if self.max_output_len < 2 {
            return Err(DecodeError::InvalidConfig("max_output_len must be at least 2".into()));
        }
        if !(self.inference_tau > 0.0 && self.inference_tau.is_finite()) {
            return Err(DecodeError::InvalidConfig(format!("inference_tau must be positive, got {}", self.inference_tau)));
        }
        if !self.length_penalty.is_finite() {
            return Err(DecodeError::InvalidConfig("length_penalty must be finite".into()));
        }
        Ok(())
    }
}

/// Next-token log-probabilities given the tokens generated so far.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>, ModelError>;
}

/// Scores prefixes with the model; the encoder runs once per input.
pub struct ModelScorer<'a> {
    params: &'a ModelParams<f32>,
    cfg: &'a ModelConfig,
    memory: Vec<f32>,
    memory_len: usize,
    tau: f32,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams<f32>, cfg: &'a ModelConfig, input_ids: &[u32], tau: f64) -> Result<Self, ModelError> {
        let enc = encode(params, cfg, input_ids, None)?;
        Ok(ModelScorer { params, cfg, memory: enc.memory, memory_len: enc.len, tau: tau as f32 })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        let mut dec_ids = Vec::with_capacity(prefix.len() + 1);
        dec_ids.push(DECODER_START_ID);
        dec_ids.extend_from_slice(prefix);
        let state = decode(self.params, self.cfg, &self.memory, self.memory_len, &dec_ids, self.tau, None)?;
        let d = self.cfg.d_model;
        let last = &state.hidden[(state.len - 1) * d..state.len * d];
        let logits = logits_for(self.params, self.cfg, last, 1);
        Ok(log_softmax(&logits.data))
    }
}

pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&x| x as f64 - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Cumulative log-probability.
    pub score: f64,
}

/// Higher score first, then the lexicographically smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

fn normalized(h: &Hypothesis, length_penalty: f64) -> f64 {
    if length_penalty == 0.0 {
        h.score
    } else {
        h.score / (h.tokens.len() as f64).powf(length_penalty)
    }
}

/// Beam search over `scorer`.
///
/// Each step expands every live hypothesis by every token and keeps the best
/// `beam_size − finished` candidates; candidates ending in EOS retire to the
/// finished pool. Stops when `beam_size` hypotheses have finished, none are
/// live, or `max_output_len` tokens have been generated. Returns the best
/// finished hypothesis, or the best live one if nothing finished.
pub fn beam_search(scorer: &mut dyn StepScorer, cfg: &BeamConfig) -> Result<Hypothesis, DecodeError> {
    cfg.validate()?;
    let vocab = scorer.vocab_size();
    let mut live = vec![Hypothesis { tokens: Vec::new(), score: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_output_len {
        let mut candidates = Vec::with_capacity(live.len() * vocab);
        for h in &live {
            let lp = scorer.log_probs(&h.tokens)?;
            debug_assert_eq!(lp.len(), vocab);
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Hypothesis { tokens, score: h.score + l });
            }
        }
        candidates.sort_by(rank);
        let keep = cfg.beam_size - finished.len();
        live = Vec::with_capacity(keep);
        for c in candidates.into_iter().take(keep) {
            if c.tokens.last() == Some(&ids::EOS) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if finished.len() >= cfg.beam_size || live.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { live } else { finished };
    let best = pool
        .into_iter()
        .min_by(|a, b| {
            normalized(b, cfg.length_penalty)
                .total_cmp(&normalized(a, cfg.length_penalty))
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .expect("at least one hypothesis survives");
    Ok(best)
}

/// Argmax decoding until EOS or `max_output_len` tokens; ties go to the lower id.
pub fn greedy(scorer: &mut dyn StepScorer, max_output_len: usize) -> Result<Hypothesis, ModelError> {
    let mut h = Hypothesis { tokens: Vec::new(), score: 0.0 };
    while h.tokens.len() < max_output_len {
        let lp = scorer.log_probs(&h.tokens)?;
        let (tok, &l) = lp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(&a.0)))
            .expect("non-empty vocabulary");
        h.tokens.push(tok as u32);
        h.score += l;
        if tok as u32 == ids::EOS {
            break;
        }
    }
    Ok(h)
}

/// Generated token ids for one encoded input.
pub fn generate(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    input_ids: &[u32],
    beam: &BeamConfig,
) -> Result<Vec<u32>, DecodeError> {
    let mut scorer = ModelScorer::new(params, cfg, input_ids, beam.inference_tau)?;
    Ok(beam_search(&mut scorer, beam)?.tokens)
}

/// One line of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub dial_id: String,
    pub turn_index: usize,
    pub grounding_pred: String,
    pub response_pred: String,
    pub parse_error: Option<ParseError>,
}

/// Generates the main-task output for an agent turn and splits it.
///
/// A sequence that does not parse yields empty strings and the error kind.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    dialogue: &Dialogue,
    turn_index: usize,
    doc: &Document,
    vocab: &Vocabulary,
    beam: &BeamConfig,
    style: PromptStyle,
    max_input_len: usize,
) -> Result<Prediction, DecodeError> {
    let inst = build_instance(dialogue, turn_index, doc, TaskKind::Main, style, vocab, max_input_len)?;
    let generated = generate(params, cfg, &inst.input_ids, beam)?;
    let (grounding_pred, response_pred, parse_error) = match parse_output(&generated, vocab) {
        Ok(p) => (p.grounding_text, p.response_text, None),
        Err(e) => (String::new(), String::new(), Some(e)),
    };
    Ok(Prediction { dial_id: dialogue.dial_id.clone(), turn_index, grounding_pred, response_pred, parse_error })
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<(), DecodeError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in predictions {
        serde_json::to_writer(&mut w, p).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, DecodeError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p = serde_json::from_str(&line).map_err(|e| DecodeError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(p);
    }
    Ok(out)
}
