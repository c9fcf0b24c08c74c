//! Word-level tokenizer with reserved marker and prompt tokens.
//!
//! Text is split on whitespace and every non-alphanumeric character becomes its
//! own token. Reserved surfaces such as `<user>` are recognised before splitting,
//! so they are never broken apart.

use std::collections::HashMap;

use thiserror::Error;

use crate::corpus::Corpus;

/// Reserved surfaces occupying ids `0..14` in this order.
pub const SPECIALS: [&str; 14] = [
    "<pad>",
    "<eos>",
    "<unk>",
    "<user>",
    "<agent>",
    "<grounding>",
    "<title>",
    "</title>",
    "<gen_both>",
    "<gen_grounding>",
    "<gen_agent>",
    "<Task1>",
    "<Task2>",
    "<Task3>",
];

/// Prompt words that always get ids right after the specials, whatever their corpus frequency.
pub const PROMPT_WORDS: [&str; 3] = ["generate", "then", ":"];

pub mod ids {
    pub const PAD: u32 = 0;
    pub const EOS: u32 = 1;
    pub const UNK: u32 = 2;
    pub const USER: u32 = 3;
    pub const AGENT: u32 = 4;
    pub const GROUNDING: u32 = 5;
    pub const TITLE: u32 = 6;
    pub const TITLE_END: u32 = 7;
    pub const GEN_BOTH: u32 = 8;
    pub const GEN_GROUNDING: u32 = 9;
    pub const GEN_AGENT: u32 = 10;
    pub const TASK1: u32 = 11;
    pub const TASK2: u32 = 12;
    pub const TASK3: u32 = 13;
    pub const GENERATE: u32 = 14;
    pub const THEN: u32 = 15;
    pub const COLON: u32 = 16;
}

const RESERVED: usize = SPECIALS.len() + PROMPT_WORDS.len();

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("invalid vocabulary listing: {0}")]
    InvalidListing(String),
}

/// Splits text into surface tokens.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word_start: Option<usize> = None;
        let mut iter = chunk.char_indices().peekable();
        while let Some((i, c)) = iter.next() {
            if c == '<' {
                if let Some(special) = SPECIALS.iter().find(|s| chunk[i..].starts_with(**s)) {
                    if let Some(ws) = word_start.take() {
                        out.push(&chunk[ws..i]);
                    }
                    out.push(&chunk[i..i + special.len()]);
                    while iter.peek().is_some_and(|(j, _)| *j < i + special.len()) {
                        iter.next();
                    }
                    continue;
                }
            }
            if c.is_alphanumeric() {
                word_start.get_or_insert(i);
            } else {
                if let Some(ws) = word_start.take() {
                    out.push(&chunk[ws..i]);
                }
                out.push(&chunk[i..i + c.len_utf8()]);
            }
        }
        if let Some(ws) = word_start {
            out.push(&chunk[ws..]);
        }
    }
    out
}

/// Whitespace-normalised re-spacing of `text` as the tokenizer sees it.
pub fn canonical_spacing(text: &str) -> String {
    pre_tokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Vocabulary from corpus titles, document bodies and utterances.
    pub fn build(corpus: &Corpus, min_freq: usize) -> Self {
        let docs = corpus.documents.values().flat_map(|d| [d.title.as_str(), d.text.as_str()]);
        let turns = corpus.dialogues.iter().flat_map(|d| d.turns.iter().map(|t| t.utterance.as_str()));
        Self::from_texts(docs.chain(turns), min_freq)
    }

    /// Frequency-descending, then lexicographic, after the reserved block.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let min_freq = min_freq.max(1);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in pre_tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq && !SPECIALS.contains(w) && !PROMPT_WORDS.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .chain(PROMPT_WORDS.iter())
            .copied()
            .chain(words.into_iter().map(|(w, _)| w))
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens).expect("reserved block is well-formed")
    }

    /// Rebuilds a vocabulary from its id-ordered token listing.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        for (i, want) in SPECIALS.iter().chain(PROMPT_WORDS.iter()).enumerate() {
            match tokens.get(i) {
                Some(t) if t == want => {}
                other => {
                    return Err(TokenizerError::InvalidListing(format!(
                        "id {i} must be {want:?}, found {other:?}"
                    )))
                }
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(TokenizerError::InvalidListing(format!("id {i} holds an empty or spaced token")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::InvalidListing(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn reserved_len() -> usize {
        RESERVED
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pre_tokenize(text).into_iter().map(|t| self.id(t).unwrap_or(ids::UNK)).collect()
    }

    /// Space-joined surfaces; padding and end-of-sequence ids are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(TokenizerError::IdOutOfRange { id, size: self.size() })?;
            if id != ids::PAD && id != ids::EOS {
                parts.push(tok);
            }
        }
        Ok(parts.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_rule() {
        assert_eq!(pre_tokenize("Renew license. Renew now"), vec!["Renew", "license", ".", "Renew", "now"]);
        assert_eq!(pre_tokenize("<user> hi,there<agent>ok"), vec!["<user>", "hi", ",", "there", "<agent>", "ok"]);
        assert_eq!(pre_tokenize("a <b> </title>"), vec!["a", "<", "b", ">", "</title>"]);
        assert_eq!(pre_tokenize("café naïve"), vec!["café", "naïve"]);
        assert!(pre_tokenize("  \n ").is_empty());
    }

    #[test]
    fn vocab_contents_and_min_freq() {
        let v = Vocabulary::from_texts(["Renew license. Renew now"], 1);
        for t in ["Renew", "license", ".", "now"] {
            assert!(v.id(t).is_some(), "{t}");
        }
        // Highest frequency first after the reserved block.
        assert_eq!(v.id("Renew"), Some(RESERVED as u32));
        let v2 = Vocabulary::from_texts(["Renew license. Renew now"], 2);
        assert_eq!(v2.id("license"), None);
        assert_eq!(v2.encode("license"), vec![ids::UNK]);
        assert_eq!(v2.encode("Renew"), vec![RESERVED as u32]);
    }

    #[test]
    fn specials_take_the_first_ids() {
        let v = Vocabulary::from_texts(["<user> hello then generate :"], 1);
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i as u32));
        }
        assert_eq!(v.id("generate"), Some(ids::GENERATE));
        assert_eq!(v.id("then"), Some(ids::THEN));
        assert_eq!(v.id(":"), Some(ids::COLON));
        assert_eq!(v.size(), RESERVED + 1);
    }

    #[test]
    fn encode_decode_basics() {
        let v = Vocabulary::from_texts(["hi yes"], 1);
        assert_eq!(v.encode("<user> hi"), vec![ids::USER, v.id("hi").unwrap()]);
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[ids::GROUNDING, v.id("yes").unwrap()]).unwrap(), "<grounding> yes");
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert_eq!(v.decode(&[ids::PAD, v.id("hi").unwrap(), ids::EOS]).unwrap(), "hi");
        assert_eq!(
            v.decode(&[999]),
            Err(TokenizerError::IdOutOfRange { id: 999, size: v.size() })
        );
    }

    #[test]
    fn listing_validation() {
        let v = Vocabulary::from_texts(["a b c"], 1);
        let again = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(v, again);
        let mut bad = v.tokens().to_vec();
        bad.swap(0, 1);
        assert!(Vocabulary::from_tokens(bad).is_err());
        let mut dup = v.tokens().to_vec();
        dup.push("a".into());
        assert!(Vocabulary::from_tokens(dup).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_on_known_words(words in prop::collection::vec("[a-z]{1,6}|[.,?!]", 0..20), spaces in prop::collection::vec(" {1,3}|\t|\n", 20)) {
            let mut text = String::new();
            for (w, s) in words.iter().zip(spaces.iter()) {
                text.push_str(w);
                text.push_str(s);
            }
            let v = Vocabulary::from_texts([text.as_str()], 1);
            let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
            prop_assert_eq!(v.decode(&v.encode(&text)).unwrap(), normalized);
        }
    }
}
