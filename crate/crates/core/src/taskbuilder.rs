//! Prompted input/target construction for the main task and the two auxiliary
//! tasks, and parsing of generated main-task outputs.
//!
//! Input layout: `prompt ∥ dialogue context ∥ document`. Targets:
//!
//! | task           | target                               |
//! |----------------|--------------------------------------|
//! | main           | `<grounding> k <agent> a <eos>`       |
//! | grounding-only | `<grounding> k <eos>`                 |
//! | agent-only     | `<agent> a <eos>`                     |

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{char_slice, Corpus, Dialogue, Document, Role};
use crate::tokenizer::{ids, TokenizerError, Vocabulary};

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("dialogue {dial_id:?} turn {turn_index} is not an agent turn")]
    NotAgentTurn { dial_id: String, turn_index: usize },
    #[error("dialogue {dial_id:?} turn {turn_index} has no grounding annotation")]
    MissingGrounding { dial_id: String, turn_index: usize },
    #[error("max input length {max} leaves no room after a {prompt}-token prompt (need at least prompt + 8)")]
    InputBudgetTooSmall { max: usize, prompt: usize },
}

/// Why a generated sequence could not be split into grounding and response.
#[derive(Debug, Clone, Copy, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseError {
    #[error("no <grounding> marker")]
    MissingGroundingMarker,
    #[error("no <agent> marker after <grounding>")]
    MissingAgentMarker,
    #[error("<agent> marker precedes <grounding>")]
    MarkersOutOfOrder,
    #[error("grounding or response segment is empty")]
    EmptySegment,
    #[error("token id out of vocabulary range")]
    InvalidToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Main,
    GroundingOnly,
    AgentOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Prompts share the `generate`, `<grounding>` and `<agent>` tokens.
    Connected,
    /// One unrelated marker per task.
    Independent,
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptStyle::Connected => "connected",
            PromptStyle::Independent => "independent",
        })
    }
}

impl FromStr for PromptStyle {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "connected" => Ok(PromptStyle::Connected),
            "independent" => Ok(PromptStyle::Independent),
            other => Err(format!("unknown prompt style {other:?}; expected connected or independent")),
        }
    }
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Main, TaskKind::GroundingOnly, TaskKind::AgentOnly];

    pub fn prompt_ids(self, style: PromptStyle) -> Vec<u32> {
        use ids::*;
        match (style, self) {
            (PromptStyle::Connected, TaskKind::Main) => vec![GENERATE, GROUNDING, THEN, AGENT, COLON],
            (PromptStyle::Connected, TaskKind::GroundingOnly) => vec![GENERATE, GROUNDING, COLON],
            (PromptStyle::Connected, TaskKind::AgentOnly) => vec![GENERATE, AGENT, COLON],
            (PromptStyle::Independent, TaskKind::Main) => vec![TASK1, COLON],
            (PromptStyle::Independent, TaskKind::GroundingOnly) => vec![TASK2, COLON],
            (PromptStyle::Independent, TaskKind::AgentOnly) => vec![TASK3, COLON],
        }
    }

    pub fn prompt_text(self, style: PromptStyle) -> &'static str {
        match (style, self) {
            (PromptStyle::Connected, TaskKind::Main) => "generate <grounding> then <agent> :",
            (PromptStyle::Connected, TaskKind::GroundingOnly) => "generate <grounding> :",
            (PromptStyle::Connected, TaskKind::AgentOnly) => "generate <agent> :",
            (PromptStyle::Independent, TaskKind::Main) => "<Task1> :",
            (PromptStyle::Independent, TaskKind::GroundingOnly) => "<Task2> :",
            (PromptStyle::Independent, TaskKind::AgentOnly) => "<Task3> :",
        }
    }
}

/// One serialized example.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub style: PromptStyle,
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub dial_id: String,
    pub turn_index: usize,
    /// Input positions covering the gold grounding span, clipped by truncation.
    pub grounding_positions: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub grounding_text: String,
    pub response_text: String,
}

fn marker(role: Role) -> &'static str {
    match role {
        Role::User => "<user>",
        Role::Agent => "<agent>",
    }
}

/// Turns before `turn_index`, each behind its role marker, most recent last.
pub fn serialize_context(dialogue: &Dialogue, turn_index: usize) -> Result<String, TaskError> {
    match dialogue.turns.get(turn_index) {
        Some(t) if t.role == Role::Agent && turn_index >= 1 => {}
        _ => return Err(TaskError::NotAgentTurn { dial_id: dialogue.dial_id.clone(), turn_index }),
    }
    let parts: Vec<String> =
        dialogue.turns[..turn_index].iter().map(|t| format!("{} {}", marker(t.role), t.utterance)).collect();
    Ok(parts.join(" "))
}

/// `<title> {title} </title> {text}`
pub fn serialize_document(doc: &Document) -> String {
    if doc.text.is_empty() {
        format!("<title> {} </title>", doc.title)
    } else {
        format!("<title> {} </title> {}", doc.title, doc.text)
    }
}

fn encode_document(doc: &Document, vocab: &Vocabulary, span: (usize, usize)) -> (Vec<u32>, Range<usize>) {
    let head = format!("<title> {} </title>", doc.title);
    let before = char_slice(&doc.text, 0, span.0).unwrap_or("");
    let inside = char_slice(&doc.text, span.0, span.1).unwrap_or("");
    let head_ids = vocab.encode(&head);
    let start = head_ids.len() + vocab.encode(before).len();
    let span_len = vocab.encode(inside).len();
    // The body is encoded whole so that a span boundary inside a word cannot change the token stream.
    let mut ids = head_ids;
    ids.extend(vocab.encode(&doc.text));
    let end = (start + span_len).min(ids.len());
    (ids, start.min(end)..end)
}

/// Builds one prompted instance for the agent turn at `turn_index`.
///
/// Over-long inputs lose document tail tokens first; if the context alone
/// overflows, its oldest tokens go next. The prompt is never cut.
pub fn build_instance(
    dialogue: &Dialogue,
    turn_index: usize,
    doc: &Document,
    kind: TaskKind,
    style: PromptStyle,
    vocab: &Vocabulary,
    max_input_len: usize,
) -> Result<TaskInstance, TaskError> {
    let context = serialize_context(dialogue, turn_index)?;
    let turn = &dialogue.turns[turn_index];
    let span = turn
        .grounding
        .ok_or_else(|| TaskError::MissingGrounding { dial_id: dialogue.dial_id.clone(), turn_index })?;
    let grounding = doc
        .slice(span)
        .ok_or_else(|| TaskError::MissingGrounding { dial_id: dialogue.dial_id.clone(), turn_index })?;

    let prompt = kind.prompt_ids(style);
    if max_input_len < prompt.len() + 8 {
        return Err(TaskError::InputBudgetTooSmall { max: max_input_len, prompt: prompt.len() });
    }
    let budget = max_input_len - prompt.len();
    let mut context_ids = vocab.encode(&context);
    if context_ids.len() > budget {
        context_ids.drain(..context_ids.len() - budget);
    }
    let (mut doc_ids, span_pos) = encode_document(doc, vocab, (span.start, span.end));
    doc_ids.truncate(budget - context_ids.len());

    let offset = prompt.len() + context_ids.len();
    let clip = |p: usize| (offset + p).min(offset + doc_ids.len());
    let grounding_positions = clip(span_pos.start)..clip(span_pos.end);

    let mut input_ids = prompt;
    input_ids.extend(context_ids);
    input_ids.extend(doc_ids);

    let mut target_ids = Vec::new();
    if kind != TaskKind::AgentOnly {
        target_ids.push(ids::GROUNDING);
        target_ids.extend(vocab.encode(grounding));
    }
    if kind != TaskKind::GroundingOnly {
        target_ids.push(ids::AGENT);
        target_ids.extend(vocab.encode(&turn.utterance));
    }
    target_ids.push(ids::EOS);

    Ok(TaskInstance {
        kind,
        style,
        input_ids,
        target_ids,
        dial_id: dialogue.dial_id.clone(),
        turn_index,
        grounding_positions,
    })
}

/// One main instance per agent turn, plus one of each auxiliary kind when
/// `enable_aux`; per turn the order is main, grounding-only, agent-only.
pub fn build_training_set(
    corpus: &Corpus,
    style: PromptStyle,
    enable_aux: bool,
    vocab: &Vocabulary,
    max_input_len: usize,
) -> Result<Vec<TaskInstance>, TaskError> {
    let kinds: &[TaskKind] = if enable_aux { &TaskKind::ALL } else { &TaskKind::ALL[..1] };
    let mut out = Vec::with_capacity(corpus.num_agent_turns() * kinds.len());
    for t in corpus.agent_turns() {
        for &kind in kinds {
            out.push(build_instance(t.dialogue, t.turn_index, t.document, kind, style, vocab, max_input_len)?);
        }
    }
    Ok(out)
}

/// Splits a generated main-task sequence at the first `<agent>` after `<grounding>`.
pub fn parse_output(generated: &[u32], vocab: &Vocabulary) -> Result<ParsedOutput, ParseError> {
    let end = generated.iter().position(|&t| t == ids::EOS).unwrap_or(generated.len());
    let seq = &generated[..end];
    let first_agent = seq.iter().position(|&t| t == ids::AGENT);
    let g = match seq.iter().position(|&t| t == ids::GROUNDING) {
        Some(g) => g,
        None => return Err(ParseError::MissingGroundingMarker),
    };
    if first_agent.is_some_and(|a| a < g) {
        return Err(ParseError::MarkersOutOfOrder);
    }
    let a = first_agent.ok_or(ParseError::MissingAgentMarker)?;
    let decode = |s: &[u32]| vocab.decode(s).map_err(|_: TokenizerError| ParseError::InvalidToken);
    let grounding_text = decode(&seq[g + 1..a])?;
    let response_text = decode(&seq[a + 1..])?;
    if grounding_text.is_empty() || response_text.is_empty() {
        return Err(ParseError::EmptySegment);
    }
    Ok(ParsedOutput { grounding_text, response_text })
}

#[derive(Serialize)]
struct InstanceRecord<'a> {
    kind: TaskKind,
    input_text: String,
    target_text: String,
    dial_id: &'a str,
    turn_index: usize,
}

/// Debug dump: one JSON record per instance.
pub fn write_instance_dump(path: &Path, instances: &[TaskInstance], vocab: &Vocabulary) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in instances {
        let rec = InstanceRecord {
            kind: inst.kind,
            input_text: vocab.decode(&inst.input_ids).unwrap_or_default(),
            target_text: vocab.decode(&inst.target_ids).unwrap_or_default(),
            dial_id: &inst.dial_id,
            turn_index: inst.turn_index,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
