//! `docdial` command line.

pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use crate::corpus::{lowres_split, synth_corpus, Fraction};
use crate::corpus::{load_corpus, write_corpus, Corpus};
use crate::decoder::{predict, read_predictions, write_predictions, Prediction};
use crate::metrics::{evaluate, merge_rows, parse_table, table_text, write_report, TableRow};
use crate::model::Checkpoint;
use crate::taskbuilder::{build_training_set, write_instance_dump};
use crate::tokenizer::Vocabulary;
use crate::trainer::train;

use config::{resolve_train, DecodeSettings, FileConfig, TrainSettings};
use manifest::{sha256_file, RunManifest};

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const DIALOGUES_FILE: &str = "dialogues.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TSV_FILE: &str = "report.tsv";

#[derive(Debug, Parser)]
#[command(name = "docdial", version, about = "Document-grounded dialogue: joint grounding and response generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Generate a deterministic synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        dialogues: usize,
        #[arg(long, default_value_t = 8)]
        docs: usize,
        #[arg(long, default_value_t = 6)]
        max_turns: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a documents file and a dialogues file and write them as a data directory.
    Ingest {
        #[arg(long)]
        documents: PathBuf,
        #[arg(long)]
        dialogues: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep a seeded fraction of the dialogues (1/32, 1/16, 1/8, 1/4 or 1).
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fraction: Fraction,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a data directory.
    Train {
        #[arg(long, env = "DOCDIAL_DATA_DIR")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with `[train]` and `[decode]` tables; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the serialized training instances as JSONL.
        #[arg(long)]
        dump_instances: Option<PathBuf>,
        #[command(flatten)]
        settings: TrainSettings,
    },
    /// Generate grounding and response predictions for every agent turn.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "DOCDIAL_DATA_DIR")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeSettings,
    },
    /// Predict (or read predictions) and score them against the gold turns.
    Eval {
        /// Required unless `--predictions` is given.
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "DOCDIAL_DATA_DIR")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score an existing prediction dump instead of decoding.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Row label in the report; defaults to the checkpoint's training label.
        #[arg(long)]
        label: Option<String>,
        /// Training-data fraction this model saw, recorded in the report.
        #[arg(long, default_value = "1")]
        fraction: Fraction,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeSettings,
    },
    /// Merge report.tsv files into one table sorted by label and fraction.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth { seed, dialogues, docs, max_turns, out } => {
            let config = serde_json::json!({
                "seed": seed, "dialogues": dialogues, "docs": docs, "max_turns": max_turns,
            });
            RunManifest::new(config)?
                .seed("synth", seed)
                .output(&out.join(DOCUMENTS_FILE))
                .output(&out.join(DIALOGUES_FILE))
                .write(&out)?;
            let corpus = synth_corpus(seed, dialogues, docs, max_turns)?;
            save_data_dir(&corpus, &out)?;
            log::info!("wrote {} documents and {} dialogues to {}", corpus.documents.len(), corpus.dialogues.len(), out.display());
        }
        Command::Ingest { documents, dialogues, out } => {
            RunManifest::new(serde_json::json!({}))?
                .input(&documents)?
                .input(&dialogues)?
                .output(&out.join(DOCUMENTS_FILE))
                .output(&out.join(DIALOGUES_FILE))
                .write(&out)?;
            let corpus = load_corpus(&documents, &dialogues)?;
            save_data_dir(&corpus, &out)?;
            log::info!("ingested {} agent turns", corpus.num_agent_turns());
        }
        Command::Split { data, fraction, seed, out } => {
            let m = RunManifest::new(serde_json::json!({ "fraction": fraction.to_string(), "seed": seed }))?
                .seed("split", seed);
            data_inputs(m, &data)?.output(&out.join(DOCUMENTS_FILE)).output(&out.join(DIALOGUES_FILE)).write(&out)?;
            let corpus = load_data_dir(&data)?;
            let kept = lowres_split(&corpus, fraction, seed)?;
            save_data_dir(&kept, &out)?;
            log::info!("kept {} of {} dialogues", kept.dialogues.len(), corpus.dialogues.len());
        }
        Command::Train { data, out, config, dump_instances, settings } => {
            cmd_train(&data, &out, config.as_deref(), dump_instances.as_deref(), settings)?
        }
        Command::Predict { checkpoint, data, out, config, decode } => {
            let decode = decode.overlay(FileConfig::load(config.as_deref())?.decode);
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let beam = decode.resolve(ck.meta.inference_tau())?;
            let m = RunManifest::new(beam)?.input(&checkpoint)?;
            let mut manifest_path = out.clone().into_os_string();
            manifest_path.push(".manifest.json");
            data_inputs(m, &data)?.output(&out).write_to(Path::new(&manifest_path))?;
            let corpus = load_data_dir(&data)?;
            let preds = predict_all(&ck, &corpus, &beam)?;
            write_predictions(&out, &preds)?;
        }
        Command::Eval { checkpoint, data, out, predictions, label, fraction, config, decode } => {
            cmd_eval(checkpoint.as_deref(), &data, &out, predictions.as_deref(), label, fraction, config.as_deref(), decode)?
        }
        Command::Report { inputs, out } => {
            let mut rows = Vec::new();
            for path in &inputs {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                rows.extend(parse_table(&text).with_context(|| format!("parsing {}", path.display()))?);
            }
            let (rows, warnings) = merge_rows(rows);
            for w in warnings {
                log::warn!("{w}");
            }
            let text = table_text(&rows);
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
        }
    }
    Ok(())
}

fn cmd_train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    dump_instances: Option<&Path>,
    flags: TrainSettings,
) -> anyhow::Result<()> {
    let settings = flags.overlay(FileConfig::load(config)?.train);
    let (mut resolved, warnings) = resolve_train(&settings)?;
    for w in warnings {
        log::warn!("{w}");
    }
    let corpus = load_data_dir(data)?;
    let vocab = Vocabulary::build(&corpus, resolved.min_freq);
    resolved.model.vocab_size = vocab.size();

    let mut m = RunManifest::new(&resolved)?
        .seed("init", resolved.model.init_seed)
        .seed("shuffle", resolved.train.shuffle_seed)
        .seed("dropout", resolved.train.dropout_seed);
    if let Some(p) = config {
        m = m.input(p)?;
    }
    m = data_inputs(m, data)?.output(&out.join(CHECKPOINT_FILE)).output(&out.join(TRAIN_LOG_FILE));
    if let Some(p) = dump_instances {
        m = m.output(p);
    }
    m.write(out)?;

    if let Some(path) = dump_instances {
        let t = resolved.task_options;
        let instances = build_training_set(&corpus, t.style, t.enable_aux, &vocab, t.max_input_len)?;
        write_instance_dump(path, &instances, &vocab).with_context(|| format!("writing {}", path.display()))?;
    }

    log::info!(
        "training {:?} on {} agent turns, vocabulary {}, {} parameters",
        resolved.train.label,
        corpus.num_agent_turns(),
        vocab.size(),
        crate::model::ModelParams::<f32>::zeros(&resolved.model).num_scalars()
    );
    let outcome = train(&corpus, &vocab, &resolved.model, &resolved.train, resolved.task_options)?;
    let ck_path = out.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&ck_path).with_context(|| format!("writing {}", ck_path.display()))?;
    let mut log_text = String::new();
    for row in &outcome.log {
        log_text.push_str(&serde_json::to_string(row)?);
        log_text.push('\n');
    }
    std::fs::write(out.join(TRAIN_LOG_FILE), log_text)?;
    log::info!("{} steps over {} instances; checkpoint {}", outcome.total_steps, outcome.num_instances, ck_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: Option<&Path>,
    data: &Path,
    out: &Path,
    predictions: Option<&Path>,
    label: Option<String>,
    fraction: Fraction,
    config: Option<&Path>,
    decode: DecodeSettings,
) -> anyhow::Result<()> {
    let decode = decode.overlay(FileConfig::load(config)?.decode);
    let ck = match checkpoint {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let beam = match &ck {
        Some(ck) if predictions.is_none() => Some(decode.resolve(ck.meta.inference_tau())?),
        _ => None,
    };

    let mut m = RunManifest::new(serde_json::json!({ "decode": beam, "fraction": fraction.to_string() }))?;
    if let Some(p) = checkpoint {
        m = m.input(p)?;
    }
    if let Some(p) = predictions {
        m = m.input(p)?;
    }
    let preds_path = out.join(PREDICTIONS_FILE);
    if predictions.is_none() {
        m = m.output(&preds_path);
    }
    data_inputs(m, data)?.output(&out.join(REPORT_JSON_FILE)).output(&out.join(REPORT_TSV_FILE)).write(out)?;

    let corpus = load_data_dir(data)?;
    let preds = match (predictions, &ck, &beam) {
        (Some(p), _, _) => read_predictions(p)?,
        (None, Some(ck), Some(beam)) => {
            let preds = predict_all(ck, &corpus, beam)?;
            write_predictions(&preds_path, &preds)?;
            preds
        }
        _ => bail!("eval needs --checkpoint or --predictions"),
    };

    let mut report = evaluate(&preds, &corpus)?;
    report.label = label.or_else(|| ck.as_ref().map(|c| c.meta.label.clone())).unwrap_or_else(|| "run".into());
    report.fraction = fraction.to_string();
    report.checkpoint_id = match (checkpoint, predictions) {
        (Some(p), _) => sha256_file(p)?,
        (None, Some(p)) => format!("predictions:{}", sha256_file(p)?),
        (None, None) => unreachable!("checked above"),
    };
    report.flags = report_flags(ck.as_ref(), beam.as_ref());
    write_report(&out.join(REPORT_JSON_FILE), &report)?;
    std::fs::write(out.join(REPORT_TSV_FILE), table_text(&[TableRow::from(&report)]))?;
    log::info!(
        "{} n={} EM {:.2} F1 {:.2} BLEU {:.2} parse failures {}",
        report.label,
        report.n_examples,
        report.em,
        report.f1,
        report.bleu,
        report.n_parse_failures
    );
    Ok(())
}

fn report_flags(ck: Option<&Checkpoint>, beam: Option<&crate::decoder::BeamConfig>) -> BTreeMap<String, String> {
    let mut flags = BTreeMap::new();
    if let Some(ck) = ck {
        flags.insert("prompt_style".into(), ck.meta.prompt_style.to_string());
        flags.insert("lts".into(), if ck.meta.lts { "on" } else { "off" }.into());
        flags.insert("tau_end".into(), ck.meta.tau_end.to_string());
        flags.insert("max_input_len".into(), ck.meta.max_input_len.to_string());
    }
    if let Some(b) = beam {
        flags.insert("beam_size".into(), b.beam_size.to_string());
        flags.insert("max_output_len".into(), b.max_output_len.to_string());
        flags.insert("length_penalty".into(), b.length_penalty.to_string());
        flags.insert("inference_tau".into(), b.inference_tau.to_string());
    }
    flags
}

/// Decodes every agent turn of `corpus` in corpus order.
pub fn predict_all(
    ck: &Checkpoint,
    corpus: &Corpus,
    beam: &crate::decoder::BeamConfig,
) -> anyhow::Result<Vec<Prediction>> {
    let total = corpus.num_agent_turns();
    let mut preds = Vec::with_capacity(total);
    for (i, t) in corpus.agent_turns().enumerate() {
        preds.push(predict(
            &ck.params,
            &ck.config,
            t.dialogue,
            t.turn_index,
            t.document,
            &ck.vocab,
            beam,
            ck.meta.prompt_style,
            ck.meta.max_input_len,
        )?);
        if (i + 1) % 50 == 0 {
            log::info!("decoded {}/{}", i + 1, total);
        }
    }
    Ok(preds)
}

pub fn load_data_dir(dir: &Path) -> anyhow::Result<Corpus> {
    load_corpus(&dir.join(DOCUMENTS_FILE), &dir.join(DIALOGUES_FILE))
        .with_context(|| format!("loading data directory {}", dir.display()))
}

fn save_data_dir(corpus: &Corpus, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_corpus(corpus, &dir.join(DOCUMENTS_FILE), &dir.join(DIALOGUES_FILE))?;
    Ok(())
}

fn data_inputs(m: RunManifest, dir: &Path) -> anyhow::Result<RunManifest> {
    m.input(&dir.join(DOCUMENTS_FILE))?.input(&dir.join(DIALOGUES_FILE))
}
