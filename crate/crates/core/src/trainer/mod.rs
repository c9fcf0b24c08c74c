//! Teacher-forced maximum-likelihood training over the mixed task set.

mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optim::{global_norm, optimizer_step, AdamWConfig, OptimizerState};

use crate::corpus::Corpus;
use crate::model::{
    decode, encode, init_model, loss_and_gradients, shift_right, Checkpoint, CheckpointMeta, ModelConfig, ModelError,
    ModelParams,
};
use crate::schedule::{ScheduleError, ScheduleSpec};
use crate::taskbuilder::{build_training_set, PromptStyle, TaskError, TaskInstance, TaskKind};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training instances")]
    NoInstances,
    #[error("non-finite gradient at optimizer step {step}: {tensor}[{index}]")]
    NonFiniteGradient { step: u64, tensor: String, index: usize },
    #[error("non-finite loss on {dial_id} turn {turn_index} at step {step}")]
    NonFiniteLoss { step: u64, dial_id: String, turn_index: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub optimizer: AdamWConfig,
    pub tau_start: f64,
    pub tau_end: f64,
    pub shuffle_seed: u64,
    pub dropout_seed: u64,
    pub label: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 8,
            base_lr: 1e-4,
            optimizer: AdamWConfig::default(),
            tau_start: 1.0,
            tau_end: 0.7,
            shuffle_seed: 0,
            dropout_seed: 0,
            label: "run".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let o = &self.optimizer;
        let problem = if self.epochs == 0 {
            Some("epochs must be at least 1".to_string())
        } else if self.batch_size == 0 {
            Some("batch_size must be at least 1".to_string())
        } else if !(o.beta1 > 0.0 && o.beta1 < 1.0 && o.beta2 > 0.0 && o.beta2 < 1.0) {
            Some(format!("betas must lie in (0, 1), got {} and {}", o.beta1, o.beta2))
        } else if !(o.grad_clip_norm > 0.0) {
            Some(format!("grad_clip_norm must be positive, got {}", o.grad_clip_norm))
        } else if !(o.eps > 0.0 && o.weight_decay >= 0.0) {
            Some("eps must be positive and weight_decay non-negative".to_string())
        } else {
            None
        };
        match problem {
            Some(p) => Err(TrainError::InvalidConfig(p)),
            None => Ok(()),
        }
    }

    /// `epochs × ⌈num_instances / batch_size⌉`
    pub fn total_steps(&self, num_instances: usize) -> u64 {
        (self.epochs * num_instances.div_ceil(self.batch_size)) as u64
    }
}

/// Which instances to build and whether the cross-attention temperature is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskOptions {
    pub style: PromptStyle,
    pub enable_aux: bool,
    pub enable_lts: bool,
    pub max_input_len: usize,
}

/// One optimizer step. `loss` is the batch mean of per-sequence mean token loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub tau: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
    pub epoch_losses: Vec<f64>,
    pub total_steps: u64,
    pub num_instances: usize,
}

/// Loss and freshly allocated gradients of one instance, without dropout.
pub fn sequence_loss(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    instance: &TaskInstance,
    tau: f64,
) -> Result<(f64, ModelParams<f32>), ModelError> {
    let mut grads = ModelParams::zeros(cfg);
    let loss =
        loss_and_gradients(params, cfg, &instance.input_ids, &instance.target_ids, tau as f32, None, &mut grads, 1.0)?;
    Ok((loss as f64, grads))
}

/// Builds the instance set for `corpus` and trains a fresh model on it.
pub fn train(
    corpus: &Corpus,
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    tasks: TaskOptions,
) -> Result<TrainOutcome, TrainError> {
    train_cfg.validate()?;
    if model_cfg.vocab_size != vocab.size() {
        return Err(TrainError::InvalidConfig(format!(
            "model vocab_size {} differs from vocabulary size {}",
            model_cfg.vocab_size,
            vocab.size()
        )));
    }
    let instances = build_training_set(corpus, tasks.style, tasks.enable_aux, vocab, tasks.max_input_len)?;
    if instances.is_empty() {
        return Err(TrainError::NoInstances);
    }
    let total_steps = train_cfg.total_steps(instances.len());
    let schedule = if tasks.enable_lts {
        ScheduleSpec::new(train_cfg.tau_start, train_cfg.tau_end, total_steps, train_cfg.base_lr)?
    } else {
        ScheduleSpec::without_temperature(total_steps, train_cfg.base_lr)?
    };

    let mut params: ModelParams<f32> = init_model(model_cfg)?;
    let mut state = OptimizerState::new(model_cfg);
    let mut grads = ModelParams::<f32>::zeros(model_cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.shuffle_seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(train_cfg.dropout_seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut log = Vec::with_capacity(total_steps as usize);
    let mut epoch_losses = Vec::with_capacity(train_cfg.epochs);
    let mut step = 0u64;

    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            let tau = schedule.temperature_at(step)?;
            let lr = schedule.lr_at(step)?;
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f32;
            let mut batch_sum = 0.0f64;
            for &i in batch {
                let inst = &instances[i];
                let loss = loss_and_gradients(
                    &params,
                    model_cfg,
                    &inst.input_ids,
                    &inst.target_ids,
                    tau as f32,
                    Some(&mut dropout_rng),
                    &mut grads,
                    scale,
                )?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        step,
                        dial_id: inst.dial_id.clone(),
                        turn_index: inst.turn_index,
                    });
                }
                batch_sum += loss as f64;
            }
            optimizer_step(&mut params, &mut state, &grads, lr, &train_cfg.optimizer)?;
            let loss = batch_sum / batch.len() as f64;
            epoch_sum += batch_sum;
            log.push(TrainLogRow { step, epoch, loss, tau, lr });
            step += 1;
        }
        let mean = epoch_sum / instances.len() as f64;
        log::info!("{}: epoch {}/{} mean loss {mean:.4}", train_cfg.label, epoch + 1, train_cfg.epochs);
        epoch_losses.push(mean);
    }

    let meta = CheckpointMeta {
        label: train_cfg.label.clone(),
        prompt_style: tasks.style,
        max_input_len: tasks.max_input_len,
        lts: tasks.enable_lts,
        tau_start: schedule.tau_start,
        tau_end: schedule.tau_end,
    };
    let checkpoint = Checkpoint { config: model_cfg.clone(), vocab: vocab.clone(), params, meta };
    Ok(TrainOutcome { checkpoint, log, epoch_losses, total_steps, num_instances: instances.len() })
}

/// Mean cross-attention probability mass that falls on the gold grounding
/// positions, averaged over decoder layers, heads, target positions and the
/// main-task instances that still contain their grounding after truncation.
///
/// Teacher-forced, without dropout, at temperature `tau`. `None` when no
/// instance qualifies.
pub fn grounding_attention_mass(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    instances: &[TaskInstance],
    tau: f64,
) -> Result<Option<f64>, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for inst in instances.iter().filter(|i| i.kind == TaskKind::Main && !i.grounding_positions.is_empty()) {
        let enc = encode(params, cfg, &inst.input_ids, None)?;
        let dec = decode(params, cfg, &enc.memory, enc.len, &shift_right(&inst.target_ids), tau as f32, None)?;
        let mut inst_sum = 0.0;
        let mut rows = 0usize;
        for layer in dec.cross_attention() {
            for h in 0..layer.n_heads {
                for q in 0..layer.query_len {
                    let row = layer.row(h, q);
                    inst_sum += row[inst.grounding_positions.clone()].iter().map(|&p| p as f64).sum::<f64>();
                    rows += 1;
                }
            }
        }
        total += inst_sum / rows as f64;
        count += 1;
    }
    Ok((count > 0).then(|| total / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_corpus;

    fn small_model(vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            vocab_size: vocab.size(),
            max_positions: 160,
            dropout_rate: 0.1,
            init_seed: 5,
        }
    }

    fn options(enable_aux: bool, enable_lts: bool) -> TaskOptions {
        TaskOptions { style: PromptStyle::Connected, enable_aux, enable_lts, max_input_len: 160 }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { optimizer: AdamWConfig { beta1: 1.0, ..Default::default() }, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig { epochs: 3, batch_size: 4, ..Default::default() }.total_steps(9), 9);
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let corpus = synth_corpus(3, 4, 2, 4).unwrap();
        let vocab = Vocabulary::build(&corpus, 1);
        let inst = build_training_set(&corpus, PromptStyle::Connected, false, &vocab, 160).unwrap();
        let expected = (vocab.size() as f64).ln();
        for seed in 0..3 {
            let cfg = ModelConfig { init_seed: seed, dropout_rate: 0.0, ..small_model(&vocab) };
            let params = init_model(&cfg).unwrap();
            let (loss, _) = sequence_loss(&params, &cfg, &inst[0], 1.0).unwrap();
            assert!((loss - expected).abs() < 0.15 * expected, "seed {seed}: {loss} vs ln V = {expected}");
        }
    }

    #[test]
    fn schedule_columns_and_step_count() {
        let corpus = synth_corpus(3, 5, 2, 4).unwrap();
        let vocab = Vocabulary::build(&corpus, 1);
        let cfg = small_model(&vocab);
        let turns = corpus.num_agent_turns();
        let tc = TrainConfig { epochs: 2, batch_size: 4, base_lr: 1e-3, tau_end: 0.5, ..Default::default() };

        let on = train(&corpus, &vocab, &cfg, &tc, options(true, true)).unwrap();
        assert_eq!(on.num_instances, 3 * turns);
        assert_eq!(on.total_steps, 2 * (3 * turns).div_ceil(4) as u64);
        assert_eq!(on.log.len() as u64, on.total_steps);
        let spec = ScheduleSpec::new(1.0, 0.5, on.total_steps, 1e-3).unwrap();
        for row in &on.log {
            assert_eq!(row.tau, spec.temperature_at(row.step).unwrap());
            assert_eq!(row.lr, spec.lr_at(row.step).unwrap());
            assert!(row.loss >= 0.0);
        }
        assert_eq!(on.log[0].tau, 1.0);

        let off = train(&corpus, &vocab, &cfg, &tc, options(false, false)).unwrap();
        assert_eq!(off.num_instances, turns);
        assert_eq!(off.total_steps, 2 * turns.div_ceil(4) as u64);
        assert!(off.log.iter().all(|r| r.tau == 1.0));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let corpus = synth_corpus(4, 3, 1, 2).unwrap();
        let vocab = Vocabulary::build(&corpus, 1);
        let cfg = small_model(&vocab);
        let tc = TrainConfig { epochs: 30, batch_size: 2, base_lr: 3e-3, ..Default::default() };
        let a = train(&corpus, &vocab, &cfg, &tc, options(true, true)).unwrap();
        let b = train(&corpus, &vocab, &cfg, &tc, options(true, true)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert!(a.epoch_losses.last().unwrap() < &(0.7 * a.epoch_losses[0]), "{:?}", a.epoch_losses);
        let other = train(&corpus, &vocab, &cfg, &TrainConfig { shuffle_seed: 9, ..tc }, options(true, true)).unwrap();
        assert_ne!(other.log, a.log);
    }

    #[test]
    fn attention_mass_is_a_probability() {
        let corpus = synth_corpus(3, 4, 2, 4).unwrap();
        let vocab = Vocabulary::build(&corpus, 1);
        let cfg = small_model(&vocab);
        let params = init_model(&cfg).unwrap();
        let inst = build_training_set(&corpus, PromptStyle::Connected, true, &vocab, 160).unwrap();
        let mass = grounding_attention_mass(&params, &cfg, &inst, 0.7).unwrap().unwrap();
        assert!(mass > 0.0 && mass < 1.0, "{mass}");
        assert_eq!(grounding_attention_mass(&params, &cfg, &inst[1..2], 0.7).unwrap(), None);
    }
}
