//! Dialogues grounded in documents: data model, validation and line-delimited I/O.

mod split;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use split::{lowres_split, Fraction};
pub use synth::synth_corpus;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("duplicate document id {0:?}")]
    DuplicateDocument(String),
    #[error("document {0:?} has an empty title")]
    EmptyTitle(String),
    #[error("document {doc_id:?}: bad sentence bounds: {detail}")]
    BadSentenceBounds { doc_id: String, detail: String },
    #[error("duplicate dialogue id {0:?}")]
    DuplicateDialogue(String),
    #[error("dialogue {dial_id:?} references unknown document {doc_id:?}")]
    UnknownDocument { dial_id: String, doc_id: String },
    #[error("dialogue {dial_id:?} needs at least one user/agent exchange")]
    NoExchange { dial_id: String },
    #[error("dialogue {dial_id:?} turn {turn_index}: roles must alternate starting with user")]
    RoleAlternation { dial_id: String, turn_index: usize },
    #[error("dialogue {dial_id:?} turn {turn_index}: agent turn lacks a grounding span")]
    MissingGrounding { dial_id: String, turn_index: usize },
    #[error("dialogue {dial_id:?} turn {turn_index}: only agent turns may carry a grounding span")]
    UnexpectedGrounding { dial_id: String, turn_index: usize },
    #[error(
        "dialogue {dial_id:?} turn {turn_index}: grounding span [{start}, {end}) invalid for document of length {doc_len}"
    )]
    SpanOutOfRange { dial_id: String, turn_index: usize, start: usize, end: usize, doc_len: usize },
    #[error("invalid low-resource fraction {0:?}; expected one of 1/32, 1/16, 1/8, 1/4, 1")]
    InvalidFraction(String),
    #[error("corpus has no dialogues")]
    EmptyCorpus,
    #[error("invalid synthesis parameters: {0}")]
    InvalidSynthParams(String),
}

/// Slice of `text` between two Unicode-scalar offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let from = indices.nth(start)?;
    let to = if end == start { from } else { indices.nth(end - start - 1)? };
    Some(&text[from..to])
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    /// Character offsets `[start, end)` of each sentence.
    pub sentence_bounds: Vec<(usize, usize)>,
}

impl Document {
    pub fn slice(&self, span: Span) -> Option<&str> {
        char_slice(&self.text, span.start, span.end)
    }

    pub fn sentence(&self, i: usize) -> Option<&str> {
        let (s, e) = *self.sentence_bounds.get(i)?;
        char_slice(&self.text, s, e)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.title.trim().is_empty() {
            return Err(CorpusError::EmptyTitle(self.doc_id.clone()));
        }
        let len = char_len(&self.text);
        let mut prev_end = 0;
        for (i, &(s, e)) in self.sentence_bounds.iter().enumerate() {
            let bad = |detail: String| CorpusError::BadSentenceBounds { doc_id: self.doc_id.clone(), detail };
            if s >= e || e > len {
                return Err(bad(format!("sentence {i} [{s}, {e}) is empty or exceeds text length {len}")));
            }
            if s < prev_end {
                return Err(bad(format!("sentence {i} starts at {s}, before the previous end {prev_end}")));
            }
            prev_end = e;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub utterance: String,
    pub grounding: Option<Span>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dial_id: String,
    pub doc_id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn agent_turn_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns.iter().enumerate().filter(|(_, t)| t.role == Role::Agent).map(|(i, _)| i)
    }

    fn validate(&self, doc: &Document) -> Result<(), CorpusError> {
        let dial_id = || self.dial_id.clone();
        if self.turns.len() < 2 {
            return Err(CorpusError::NoExchange { dial_id: dial_id() });
        }
        let doc_len = char_len(&doc.text);
        for (turn_index, turn) in self.turns.iter().enumerate() {
            let expected = if turn_index % 2 == 0 { Role::User } else { Role::Agent };
            if turn.role != expected {
                return Err(CorpusError::RoleAlternation { dial_id: dial_id(), turn_index });
            }
            match (turn.role, turn.grounding) {
                (Role::Agent, None) => return Err(CorpusError::MissingGrounding { dial_id: dial_id(), turn_index }),
                (Role::User, Some(_)) => {
                    return Err(CorpusError::UnexpectedGrounding { dial_id: dial_id(), turn_index })
                }
                (Role::Agent, Some(Span { start, end })) if start >= end || end > doc_len => {
                    return Err(CorpusError::SpanOutOfRange { dial_id: dial_id(), turn_index, start, end, doc_len })
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Documents keyed by id plus the dialogues grounded in them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub documents: BTreeMap<String, Document>,
    pub dialogues: Vec<Dialogue>,
}

/// One agent turn to predict, addressed by dialogue position and turn index.
#[derive(Debug, Clone, Copy)]
pub struct AgentTurnRef<'a> {
    pub dialogue: &'a Dialogue,
    pub document: &'a Document,
    pub turn_index: usize,
}

impl<'a> AgentTurnRef<'a> {
    pub fn grounding_text(&self) -> &'a str {
        let span = self.dialogue.turns[self.turn_index].grounding.expect("validated agent turn");
        self.document.slice(span).expect("validated span")
    }

    pub fn response_text(&self) -> &'a str {
        &self.dialogue.turns[self.turn_index].utterance
    }
}

impl Corpus {
    /// Builds and validates a corpus.
    pub fn new(documents: Vec<Document>, dialogues: Vec<Dialogue>) -> Result<Self, CorpusError> {
        let mut map = BTreeMap::new();
        for doc in documents {
            if map.contains_key(&doc.doc_id) {
                return Err(CorpusError::DuplicateDocument(doc.doc_id));
            }
            map.insert(doc.doc_id.clone(), doc);
        }
        let corpus = Corpus { documents: map, dialogues };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for (key, doc) in &self.documents {
            if key != &doc.doc_id {
                return Err(CorpusError::DuplicateDocument(doc.doc_id.clone()));
            }
            doc.validate()?;
        }
        let mut seen = HashSet::new();
        for dialogue in &self.dialogues {
            if !seen.insert(dialogue.dial_id.as_str()) {
                return Err(CorpusError::DuplicateDialogue(dialogue.dial_id.clone()));
            }
            let doc = self.documents.get(&dialogue.doc_id).ok_or_else(|| CorpusError::UnknownDocument {
                dial_id: dialogue.dial_id.clone(),
                doc_id: dialogue.doc_id.clone(),
            })?;
            dialogue.validate(doc)?;
        }
        Ok(())
    }

    pub fn document_of(&self, dialogue: &Dialogue) -> &Document {
        &self.documents[&dialogue.doc_id]
    }

    /// Every agent turn in corpus order.
    pub fn agent_turns(&self) -> impl Iterator<Item = AgentTurnRef<'_>> {
        self.dialogues.iter().flat_map(move |dialogue| {
            let document = self.document_of(dialogue);
            dialogue.agent_turn_indices().map(move |turn_index| AgentTurnRef { dialogue, document, turn_index })
        })
    }

    pub fn num_agent_turns(&self) -> usize {
        self.dialogues.iter().map(|d| d.agent_turn_indices().count()).sum()
    }

    pub fn find_turn(&self, dial_id: &str, turn_index: usize) -> Option<AgentTurnRef<'_>> {
        let dialogue = self.dialogues.iter().find(|d| d.dial_id == dial_id)?;
        let turn = dialogue.turns.get(turn_index)?;
        (turn.role == Role::Agent).then(|| AgentTurnRef { dialogue, document: self.document_of(dialogue), turn_index })
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path).map(BufReader::new).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn write_records<'a, T: Serialize + 'a>(path: &Path, records: impl Iterator<Item = &'a T>) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).expect("corpus records serialize");
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads and validates a documents file and a dialogues file.
pub fn load_corpus(documents_path: &Path, dialogues_path: &Path) -> Result<Corpus, CorpusError> {
    let documents: Vec<Document> = read_records(documents_path)?;
    let dialogues: Vec<Dialogue> = read_records(dialogues_path)?;
    Corpus::new(documents, dialogues)
}

/// Writes the two line-delimited corpus files; documents in id order.
pub fn write_corpus(corpus: &Corpus, documents_path: &Path, dialogues_path: &Path) -> Result<(), CorpusError> {
    write_records(documents_path, corpus.documents.values())?;
    write_records(dialogues_path, corpus.dialogues.iter())
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn renewal_document() -> Document {
        let text = "Each time you renew, the school is inspected. Your application for renewal must be submitted 30 days early.";
        let first_end = text.find("inspected.").unwrap() + "inspected.".len();
        let second_start = first_end + 1;
        Document {
            doc_id: "dmv-1".into(),
            title: "Renew Driving School License".into(),
            text: text.into(),
            sentence_bounds: vec![(0, first_end), (second_start, char_len(text))],
        }
    }

    pub fn renewal_dialogue(doc: &Document, dial_id: &str) -> Dialogue {
        let (s0, e0) = doc.sentence_bounds[0];
        let (s1, e1) = doc.sentence_bounds[1];
        Dialogue {
            dial_id: dial_id.into(),
            doc_id: doc.doc_id.clone(),
            turns: vec![
                Turn { role: Role::User, utterance: "I would like to renew my license.".into(), grounding: None },
                Turn {
                    role: Role::Agent,
                    utterance: "Each time you renew, an inspection happens.".into(),
                    grounding: Some(Span { start: s0, end: e0 }),
                },
                Turn { role: Role::User, utterance: "How often do I apply?".into(), grounding: None },
                Turn {
                    role: Role::Agent,
                    utterance: "Renewal of a Driving School License needs an application 30 days early.".into(),
                    grounding: Some(Span { start: s1, end: e1 }),
                },
            ],
        }
    }

    pub fn two_dialogue_corpus() -> Corpus {
        let doc = renewal_document();
        let a = renewal_dialogue(&doc, "d1");
        let b = renewal_dialogue(&doc, "d2");
        Corpus::new(vec![doc], vec![a, b]).unwrap()
    }
}
