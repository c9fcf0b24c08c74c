//! Seeded generator of templated documents and grounded dialogues.
//!
//! Every document sentence is built around a topic noun that is unique within
//! its document, and every user question names one of those topics. The agent
//! reply wraps the grounding sentence in a template chosen by the sentence's
//! qualifier, so both the grounding and the reply are recoverable from the input.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{char_len, Corpus, CorpusError, Dialogue, Document, Role, Span, Turn};

const DEPARTMENTS: [&str; 8] = [
    "Motor Vehicles",
    "Social Security",
    "Student Aid",
    "Veterans Affairs",
    "Health Care",
    "Housing",
    "Taxation",
    "Immigration",
];

const SUBJECTS: [&str; 8] = [
    "Your application",
    "The office",
    "The fee",
    "Your request",
    "The form",
    "The notice",
    "Your file",
    "The approval",
];

const TOPICS: [&str; 40] = [
    "license", "passport", "vehicle", "permit", "tax", "benefit", "pension", "claim", "loan", "visa",
    "insurance", "ticket", "card", "certificate", "registration", "refund", "deposit", "appointment",
    "hearing", "grant", "subsidy", "voucher", "exam", "course", "record", "statement", "transfer",
    "badge", "contract", "lease", "mortgage", "invoice", "bill", "fine", "waiver", "exemption",
    "allowance", "credit", "coverage", "premium",
];

const PREDICATES: [&str; 8] = [
    "must be submitted",
    "can be renewed",
    "is processed",
    "may be cancelled",
    "should be reviewed",
    "is approved",
    "will be mailed",
    "must be signed",
];

const QUALIFIERS: [&str; 8] = [
    "within ten days",
    "at the local office",
    "before the deadline",
    "by the state agency",
    "after a short review",
    "online at any time",
    "during business hours",
    "with a valid form",
];

const QUESTIONS: [&str; 5] = [
    "how does it work for the {} ?",
    "i have a question about my {} .",
    "what should i know about the {} ?",
    "can you help me with the {} ?",
    "tell me about the {} please .",
];

const REPLIES: [&str; 4] = ["you should know that {} .", "according to the guide , {} .", "please note that {} .", "in short , {} ."];

const MIN_SENTENCES: usize = 5;
const MAX_SENTENCES: usize = 7;

struct SentencePlan {
    topic: &'static str,
    qualifier: usize,
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn make_document(rng: &mut ChaCha8Rng, index: usize) -> (Document, Vec<SentencePlan>) {
    let n = rng.random_range(MIN_SENTENCES..=MAX_SENTENCES);
    let topics = sample(rng, TOPICS.len(), n);
    let mut text = String::new();
    let mut bounds = Vec::with_capacity(n);
    let mut plans = Vec::with_capacity(n);
    for t in topics.iter() {
        let subject = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
        let predicate = PREDICATES[rng.random_range(0..PREDICATES.len())];
        let qualifier = rng.random_range(0..QUALIFIERS.len());
        let sentence = format!("{subject} for the {} {predicate} {} .", TOPICS[t], QUALIFIERS[qualifier]);
        if !text.is_empty() {
            text.push(' ');
        }
        let start = char_len(&text);
        text.push_str(&sentence);
        bounds.push((start, char_len(&text)));
        plans.push(SentencePlan { topic: TOPICS[t], qualifier });
    }
    let dept = DEPARTMENTS[index % DEPARTMENTS.len()];
    let title = match index / DEPARTMENTS.len() {
        0 => format!("{dept} Services"),
        round => format!("{dept} Services {}", round + 1),
    };
    let doc = Document { doc_id: format!("doc-{index:03}"), title, text, sentence_bounds: bounds };
    (doc, plans)
}

/// Deterministic synthetic corpus.
///
/// Each dialogue has between 1 and `max_turns / 2` user/agent exchanges; each
/// agent turn is grounded in exactly one full document sentence.
pub fn synth_corpus(seed: u64, n_dialogues: usize, n_docs: usize, max_turns: usize) -> Result<Corpus, CorpusError> {
    if n_dialogues == 0 || n_docs == 0 || max_turns < 2 {
        return Err(CorpusError::InvalidSynthParams(format!(
            "need n_dialogues >= 1, n_docs >= 1, max_turns >= 2 (got {n_dialogues}, {n_docs}, {max_turns})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (documents, plans): (Vec<_>, Vec<_>) = (0..n_docs).map(|i| make_document(&mut rng, i)).unzip();

    let mut dialogues = Vec::with_capacity(n_dialogues);
    for i in 0..n_dialogues {
        let d = rng.random_range(0..n_docs);
        let doc = &documents[d];
        let max_pairs = (max_turns / 2).min(doc.sentence_bounds.len());
        let pairs = rng.random_range(1..=max_pairs);
        let mut turns = Vec::with_capacity(2 * pairs);
        for k in sample(&mut rng, doc.sentence_bounds.len(), pairs).iter() {
            let plan = &plans[d][k];
            let question = QUESTIONS[rng.random_range(0..QUESTIONS.len())].replace("{}", plan.topic);
            let sentence = doc.sentence(k).expect("bounds are in range");
            let core = lowercase_first(sentence.trim_end_matches(" ."));
            let reply = REPLIES[plan.qualifier % REPLIES.len()].replace("{}", &core);
            let (start, end) = doc.sentence_bounds[k];
            turns.push(Turn { role: Role::User, utterance: question, grounding: None });
            turns.push(Turn { role: Role::Agent, utterance: reply, grounding: Some(Span { start, end }) });
        }
        dialogues.push(Dialogue { dial_id: format!("synth-{seed}-{i:04}"), doc_id: doc.doc_id.clone(), turns });
    }
    Corpus::new(documents, dialogues)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = synth_corpus(7, 4, 2, 6).unwrap();
        let b = synth_corpus(7, 4, 2, 6).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(8, 4, 2, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_grounding_is_a_full_sentence() {
        let corpus = synth_corpus(7, 40, 5, 6).unwrap();
        for t in corpus.agent_turns() {
            let span = t.dialogue.turns[t.turn_index].grounding.unwrap();
            assert!(t.document.sentence_bounds.contains(&(span.start, span.end)));
            assert!(t.response_text().contains(&lowercase_first(t.grounding_text().trim_end_matches(" ."))));
        }
    }

    #[test]
    fn rejects_degenerate_parameters() {
        assert!(synth_corpus(1, 0, 1, 2).is_err());
        assert!(synth_corpus(1, 1, 0, 2).is_err());
        assert!(synth_corpus(1, 1, 1, 1).is_err());
        assert!(synth_corpus(1, 1, 1, 2).is_ok());
    }

    #[test]
    fn topics_are_unique_within_a_document() {
        let corpus = synth_corpus(3, 2, 12, 4).unwrap();
        for doc in corpus.documents.values() {
            let topics: Vec<&str> = (0..doc.sentence_bounds.len())
                .map(|i| doc.sentence(i).unwrap().split(" for the ").nth(1).unwrap().split(' ').next().unwrap())
                .collect();
            let mut dedup = topics.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), topics.len(), "{topics:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn output_always_validates(seed in any::<u64>(), n in 1usize..12, docs in 1usize..5, turns in 2usize..9) {
            let corpus = synth_corpus(seed, n, docs, turns).unwrap();
            prop_assert!(corpus.validate().is_ok());
            prop_assert_eq!(corpus.dialogues.len(), n);
            for d in &corpus.dialogues {
                prop_assert!(d.turns.len() <= turns.max(2));
            }
        }
    }
}
