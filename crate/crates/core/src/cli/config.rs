//! Profiles, config files and flag resolution (flags > config file > profile defaults).

use std::path::Path;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::decoder::BeamConfig;
use crate::model::ModelConfig;
use crate::taskbuilder::PromptStyle;
use crate::trainer::{AdamWConfig, TaskOptions, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small model sized for one CPU core.
    Desk,
    /// Base-size encoder-decoder with the long input budget.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Tasks {
    #[value(name = "main")]
    #[serde(rename = "main")]
    Main,
    #[value(name = "main+aux")]
    #[serde(rename = "main+aux")]
    MainAux,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

struct ProfileDefaults {
    d_model: usize,
    n_heads: usize,
    n_enc_layers: usize,
    n_dec_layers: usize,
    d_ff: usize,
    max_input_len: usize,
    base_lr: f64,
}

impl Profile {
    fn defaults(self) -> ProfileDefaults {
        match self {
            Profile::Desk => ProfileDefaults {
                d_model: 128,
                n_heads: 4,
                n_enc_layers: 2,
                n_dec_layers: 2,
                d_ff: 512,
                max_input_len: 512,
                base_lr: 1e-3,
            },
            Profile::Paper => ProfileDefaults {
                d_model: 768,
                n_heads: 12,
                n_enc_layers: 12,
                n_dec_layers: 12,
                d_ff: 3072,
                max_input_len: 2560,
                base_lr: 1e-4,
            },
        }
    }
}

/// Training and model settings; every field may come from a flag or the `[train]` table.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Main task only, or main plus the two auxiliary tasks.
    #[arg(long, value_enum)]
    pub tasks: Option<Tasks>,
    #[arg(long)]
    pub prompt_style: Option<PromptStyle>,
    /// Linear cross-attention temperature schedule.
    #[arg(long, value_enum)]
    pub lts: Option<Switch>,
    #[arg(long)]
    pub tau_start: Option<f64>,
    #[arg(long)]
    pub tau_end: Option<f64>,
    /// Defaults to 5 with auxiliary tasks and 10 without.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub max_input_len: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long)]
    pub dropout_seed: Option<u64>,
    /// Minimum corpus frequency for a word to enter the vocabulary.
    #[arg(long)]
    pub min_freq: Option<usize>,
    #[arg(long)]
    pub label: Option<String>,
}

impl TrainSettings {
    /// Fills every unset field of `self` from `lower`.
    pub fn overlay(self, lower: TrainSettings) -> TrainSettings {
        TrainSettings {
            profile: self.profile.or(lower.profile),
            tasks: self.tasks.or(lower.tasks),
            prompt_style: self.prompt_style.or(lower.prompt_style),
            lts: self.lts.or(lower.lts),
            tau_start: self.tau_start.or(lower.tau_start),
            tau_end: self.tau_end.or(lower.tau_end),
            epochs: self.epochs.or(lower.epochs),
            batch_size: self.batch_size.or(lower.batch_size),
            lr: self.lr.or(lower.lr),
            weight_decay: self.weight_decay.or(lower.weight_decay),
            grad_clip: self.grad_clip.or(lower.grad_clip),
            max_input_len: self.max_input_len.or(lower.max_input_len),
            d_model: self.d_model.or(lower.d_model),
            heads: self.heads.or(lower.heads),
            enc_layers: self.enc_layers.or(lower.enc_layers),
            dec_layers: self.dec_layers.or(lower.dec_layers),
            d_ff: self.d_ff.or(lower.d_ff),
            dropout: self.dropout.or(lower.dropout),
            init_seed: self.init_seed.or(lower.init_seed),
            shuffle_seed: self.shuffle_seed.or(lower.shuffle_seed),
            dropout_seed: self.dropout_seed.or(lower.dropout_seed),
            min_freq: self.min_freq.or(lower.min_freq),
            label: self.label.or(lower.label),
        }
    }
}

/// Decoding settings; flags or the `[decode]` table.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub max_output_len: Option<usize>,
    #[arg(long)]
    pub length_penalty: Option<f64>,
    /// Cross-attention temperature at inference; defaults to the checkpoint's final training value.
    #[arg(long)]
    pub tau: Option<f64>,
}

impl DecodeSettings {
    pub fn overlay(self, lower: DecodeSettings) -> DecodeSettings {
        DecodeSettings {
            beam_size: self.beam_size.or(lower.beam_size),
            max_output_len: self.max_output_len.or(lower.max_output_len),
            length_penalty: self.length_penalty.or(lower.length_penalty),
            tau: self.tau.or(lower.tau),
        }
    }

    pub fn resolve(&self, checkpoint_tau: f64) -> anyhow::Result<BeamConfig> {
        let beam = BeamConfig {
            beam_size: self.beam_size.unwrap_or(2),
            max_output_len: self.max_output_len.unwrap_or(256),
            length_penalty: self.length_penalty.unwrap_or(0.0),
            inference_tau: self.tau.unwrap_or(checkpoint_tau),
        };
        beam.validate()?;
        Ok(beam)
    }
}

/// Contents of a `--config` TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainSettings,
    pub decode: DecodeSettings,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Fully resolved training run; echoed into the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTrain {
    pub profile: Profile,
    pub tasks: Tasks,
    pub min_freq: usize,
    pub task_options: TaskOptions,
    /// `vocab_size` is filled in once the vocabulary is built.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Applies profile defaults and checks flag combinations.
///
/// Returns the resolved settings and any warnings for the caller to print.
pub fn resolve_train(s: &TrainSettings) -> anyhow::Result<(ResolvedTrain, Vec<String>)> {
    let mut warnings = Vec::new();
    let profile = s.profile.unwrap_or(Profile::Desk);
    let d = profile.defaults();
    let tasks = s.tasks.unwrap_or(Tasks::MainAux);
    let enable_lts = s.lts.unwrap_or(Switch::On) == Switch::On;
    let mut tau_start = s.tau_start.unwrap_or(1.0);
    let mut tau_end = s.tau_end.unwrap_or(0.7);
    if !enable_lts {
        if s.tau_end.is_some() || s.tau_start.is_some() {
            warnings.push("--tau-start/--tau-end are ignored with --lts off".to_string());
        }
        tau_start = 1.0;
        tau_end = 1.0;
    }
    if !(tau_end > 0.0 && tau_end <= tau_start) {
        bail!("need 0 < tau_end <= tau_start, got tau_start={tau_start} tau_end={tau_end}");
    }
    let max_input_len = s.max_input_len.unwrap_or(d.max_input_len);
    let model = ModelConfig {
        d_model: s.d_model.unwrap_or(d.d_model),
        n_heads: s.heads.unwrap_or(d.n_heads),
        n_enc_layers: s.enc_layers.unwrap_or(d.n_enc_layers),
        n_dec_layers: s.dec_layers.unwrap_or(d.n_dec_layers),
        d_ff: s.d_ff.unwrap_or(d.d_ff),
        vocab_size: 0,
        max_positions: max_input_len,
        dropout_rate: s.dropout.unwrap_or(0.1),
        init_seed: s.init_seed.unwrap_or(0),
    };
    let defaults = AdamWConfig::default();
    let train = TrainConfig {
        epochs: s.epochs.unwrap_or(if tasks == Tasks::MainAux { 5 } else { 10 }),
        batch_size: s.batch_size.unwrap_or(8),
        base_lr: s.lr.unwrap_or(d.base_lr),
        optimizer: AdamWConfig {
            weight_decay: s.weight_decay.unwrap_or(defaults.weight_decay),
            grad_clip_norm: s.grad_clip.unwrap_or(defaults.grad_clip_norm),
            ..defaults
        },
        tau_start,
        tau_end,
        shuffle_seed: s.shuffle_seed.unwrap_or(0),
        dropout_seed: s.dropout_seed.unwrap_or(0),
        label: s.label.clone().unwrap_or_else(|| "run".to_string()),
    };
    train.validate()?;
    let task_options = TaskOptions {
        style: s.prompt_style.unwrap_or(PromptStyle::Connected),
        enable_aux: tasks == Tasks::MainAux,
        enable_lts,
        max_input_len,
    };
    let resolved =
        ResolvedTrain { profile, tasks, min_freq: s.min_freq.unwrap_or(1).max(1), task_options, model, train };
    Ok((resolved, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_and_task_defaults() {
        let (r, w) = resolve_train(&TrainSettings::default()).unwrap();
        assert!(w.is_empty());
        assert_eq!(r.profile, Profile::Desk);
        assert_eq!((r.model.d_model, r.model.n_heads, r.model.n_enc_layers, r.model.n_dec_layers), (128, 4, 2, 2));
        assert_eq!(r.task_options.max_input_len, 512);
        assert_eq!(r.train.epochs, 5);
        assert!(r.task_options.enable_aux && r.task_options.enable_lts);
        assert_eq!((r.train.tau_start, r.train.tau_end), (1.0, 0.7));

        let main_only = TrainSettings { tasks: Some(Tasks::Main), ..Default::default() };
        assert_eq!(resolve_train(&main_only).unwrap().0.train.epochs, 10);

        let paper = TrainSettings { profile: Some(Profile::Paper), ..Default::default() };
        let (p, _) = resolve_train(&paper).unwrap();
        assert_eq!((p.task_options.max_input_len, p.train.base_lr, p.model.d_model), (2560, 1e-4, 768));
    }

    #[test]
    fn tau_end_with_lts_off_warns_and_is_ignored() {
        let s = TrainSettings { lts: Some(Switch::Off), tau_end: Some(0.5), ..Default::default() };
        let (r, w) = resolve_train(&s).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!((r.train.tau_start, r.train.tau_end), (1.0, 1.0));
        let bad = TrainSettings { tau_end: Some(1.5), ..Default::default() };
        assert!(resolve_train(&bad).is_err());
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file: FileConfig = toml::from_str(
            "[train]\nepochs = 3\nlr = 0.002\ntasks = \"main\"\n\n[decode]\nbeam_size = 4\n",
        )
        .unwrap();
        let flags = TrainSettings { epochs: Some(7), ..Default::default() };
        let merged = flags.overlay(file.train.clone());
        let (r, _) = resolve_train(&merged).unwrap();
        assert_eq!(r.train.epochs, 7);
        assert_eq!(r.train.base_lr, 0.002);
        assert_eq!(r.tasks, Tasks::Main);
        let beam = DecodeSettings::default().overlay(file.decode).resolve(0.7).unwrap();
        assert_eq!((beam.beam_size, beam.inference_tau), (4, 0.7));
        assert!(toml::from_str::<FileConfig>("[train]\nbogus = 1\n").is_err());
    }
}
