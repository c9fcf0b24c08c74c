//! Span-QA style EM/F1 for grounding and corpus BLEU-4 for responses.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Fraction};
use crate::decoder::Prediction;
use crate::tokenizer::canonical_spacing;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{preds} predictions but {golds} references")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("empty corpus")]
    Empty,
    #[error("prediction for {dial_id} turn {turn_index} has no gold agent turn")]
    UnresolvedPrediction { dial_id: String, turn_index: usize },
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("report table line {line}: {message}")]
    Table { line: usize, message: String },
}

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let lowered: String = text.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    lowered
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1.0 iff both sides normalize to the same string.
pub fn exact_match(pred: &str, gold: &str) -> f64 {
    if normalize(pred) == normalize(gold) {
        1.0
    } else {
        0.0
    }
}

/// Harmonic mean of token precision and recall over normalized token multisets.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize(pred);
    let g = normalize(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    match (pt.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU-4 in `[0, 100]` over lowercased whitespace tokens.
///
/// Clipped n-gram counts are pooled over the corpus; a zero pooled precision
/// at any order gives 0 (no smoothing). Brevity penalty `exp(1 − r/c)` when
/// the total candidate length `c` is below the reference length `r`.
pub fn corpus_bleu(preds: &[String], golds: &[String]) -> Result<f64, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let lower_p: Vec<String> = preds.iter().map(|s| s.to_lowercase()).collect();
    let lower_g: Vec<String> = golds.iter().map(|s| s.to_lowercase()).collect();
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (p, g) in lower_p.iter().zip(&lower_g) {
        let pt: Vec<&str> = p.split_whitespace().collect();
        let gt: Vec<&str> = g.split_whitespace().collect();
        c += pt.len();
        r += gt.len();
        for n in 1..=4 {
            let cand = ngram_counts(&pt, n);
            let refs = ngram_counts(&gt, n);
            totals[n - 1] += pt.len().saturating_sub(n - 1);
            matches[n - 1] += cand.iter().map(|(k, &v)| v.min(refs.get(k).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if matches.contains(&0) {
        return Ok(0.0);
    }
    let log_mean = (0..4).map(|i| (matches[i] as f64 / totals[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * log_mean.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub dial_id: String,
    pub turn_index: usize,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub fraction: String,
    pub checkpoint_id: String,
    /// Settings the predictions were produced with.
    pub flags: BTreeMap<String, String>,
    /// Percentages.
    pub em: f64,
    pub f1: f64,
    pub bleu: f64,
    pub n_examples: usize,
    pub n_parse_failures: usize,
    pub per_example: Vec<ExampleScore>,
}

/// Scores predictions against the corpus gold turns.
///
/// EM/F1 are macro-averaged against the gold grounding text; BLEU compares
/// responses with the gold utterances, both sides in the tokenizer's spacing.
/// Parse failures carry empty predictions and are counted.
pub fn evaluate(predictions: &[Prediction], corpus: &Corpus) -> Result<EvalReport, MetricsError> {
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut per_example = Vec::with_capacity(predictions.len());
    let mut responses = Vec::with_capacity(predictions.len());
    let mut references = Vec::with_capacity(predictions.len());
    for p in predictions {
        let gold = corpus.find_turn(&p.dial_id, p.turn_index).ok_or_else(|| MetricsError::UnresolvedPrediction {
            dial_id: p.dial_id.clone(),
            turn_index: p.turn_index,
        })?;
        per_example.push(ExampleScore {
            dial_id: p.dial_id.clone(),
            turn_index: p.turn_index,
            em: exact_match(&p.grounding_pred, gold.grounding_text()),
            f1: token_f1(&p.grounding_pred, gold.grounding_text()),
        });
        responses.push(canonical_spacing(&p.response_pred));
        references.push(canonical_spacing(gold.response_text()));
    }
    let n = per_example.len() as f64;
    Ok(EvalReport {
        label: String::new(),
        fraction: Fraction::Full.to_string(),
        checkpoint_id: String::new(),
        flags: BTreeMap::new(),
        em: 100.0 * per_example.iter().map(|e| e.em).sum::<f64>() / n,
        f1: 100.0 * per_example.iter().map(|e| e.f1).sum::<f64>() / n,
        bleu: corpus_bleu(&responses, &references)?,
        n_examples: per_example.len(),
        n_parse_failures: predictions.iter().filter(|p| p.parse_error.is_some()).count(),
        per_example,
    })
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<(), MetricsError> {
    let mut text = serde_json::to_string_pretty(report).map_err(std::io::Error::from)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub const TABLE_HEADER: &str = "label\tfraction\tem\tf1\tbleu\tn\tparse_failures";

/// One flat result row for assembling comparison tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub fraction: String,
    pub em: f64,
    pub f1: f64,
    pub bleu: f64,
    pub n: usize,
    pub parse_failures: usize,
}

impl From<&EvalReport> for TableRow {
    fn from(r: &EvalReport) -> Self {
        TableRow {
            label: r.label.clone(),
            fraction: r.fraction.clone(),
            em: r.em,
            f1: r.f1,
            bleu: r.bleu,
            n: r.n_examples,
            parse_failures: r.n_parse_failures,
        }
    }
}

impl TableRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}",
            self.label, self.fraction, self.em, self.f1, self.bleu, self.n, self.parse_failures
        )
    }

    fn parse(line: &str, line_no: usize) -> Result<Self, MetricsError> {
        let err = |message: String| MetricsError::Table { line: line_no, message };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 tab-separated fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        let count = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
        Ok(TableRow {
            label: f[0].to_string(),
            fraction: f[1].to_string(),
            em: num(f[2])?,
            f1: num(f[3])?,
            bleu: num(f[4])?,
            n: count(f[5])?,
            parse_failures: count(f[6])?,
        })
    }
}

/// Header plus one row.
pub fn table_text(rows: &[TableRow]) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_line());
    }
    s
}

/// Reads rows from table text; header lines and blank lines are skipped.
pub fn parse_table(text: &str) -> Result<Vec<TableRow>, MetricsError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && *l != TABLE_HEADER)
        .map(|(i, l)| TableRow::parse(l, i + 1))
        .collect()
}

fn fraction_key(f: &str) -> f64 {
    f.parse::<Fraction>().map(|f| f.value()).unwrap_or(f64::INFINITY)
}

/// Merges rows in input order; a later row with the same label and fraction
/// replaces an earlier one. Output is sorted by label, then fraction value.
/// Returns the merged rows and one warning per replaced duplicate.
pub fn merge_rows(rows: Vec<TableRow>) -> (Vec<TableRow>, Vec<String>) {
    let mut warnings = Vec::new();
    let mut merged: Vec<TableRow> = Vec::new();
    for row in rows {
        if let Some(slot) = merged.iter_mut().find(|r| r.label == row.label && r.fraction == row.fraction) {
            warnings.push(format!("duplicate row for label {:?} fraction {}; keeping the later one", row.label, row.fraction));
            *slot = row;
        } else {
            merged.push(row);
        }
    }
    merged.sort_by(|a, b| {
        a.label
            .cmp(&b.label)
            .then(fraction_key(&a.fraction).total_cmp(&fraction_key(&b.fraction)))
            .then_with(|| a.fraction.cmp(&b.fraction))
    });
    (merged, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::two_dialogue_corpus;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize("The Answer!"), "answer");
        assert_eq!(normalize("a  b"), "b");
        assert_eq!(normalize("  An apple, the pear; a-ha  "), "apple pear aha");
        assert_eq!(normalize("theory another"), "theory another");
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match("Your application for renewal", "your application for Renewal."), 1.0);
        assert_eq!(exact_match("", "gold"), 0.0);
        assert_eq!(exact_match("fee is due now", "fee is paid now"), 0.0);
    }

    #[test]
    fn f1_cases() {
        // Two of three tokens shared on each side: P = R = 2/3.
        assert!((token_f1("x b c", "b c d") - 2.0 / 3.0).abs() < 1e-12);
        // Literally "a b c" loses the article: P = 1, R = 2/3, F1 = 0.8.
        assert!((token_f1("a b c", "b c d") - 0.8).abs() < 1e-12);
        assert_eq!(token_f1("same words", "same words"), 1.0);
        assert_eq!(token_f1("one two", "three four"), 0.0);
        assert_eq!(token_f1("", "the"), 1.0);
        assert_eq!(token_f1("", "word"), 0.0);
        // Multiset: repeated tokens only match as often as they occur in gold.
        assert!((token_f1("x x x", "x y") - 2.0 * (1.0 / 3.0) * 0.5 / (1.0 / 3.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn bleu_cases() {
        let golds = s(&["the cat sat on the mat", "a quick brown fox jumps"]);
        assert!((corpus_bleu(&golds, &golds).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(corpus_bleu(&s(&["the cat sat"]), &s(&["the cat sat down"])).unwrap(), 0.0);
        assert_eq!(corpus_bleu(&s(&["a a a a a"]), &s(&["b b b b b"])).unwrap(), 0.0);
        assert!(matches!(corpus_bleu(&s(&["x"]), &[]), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(corpus_bleu(&[], &[]), Err(MetricsError::Empty)));
        assert!((corpus_bleu(&s(&["The Cat Sat On The Mat"]), &s(&["the cat sat on the mat"])).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_hand_computed() {
        // Candidate "the cat sat on a mat" vs "the cat sat on the mat":
        // p1 = 5/6, p2 = 3/5, p3 = 2/4, p4 = 1/3, equal lengths so no penalty.
        let got = corpus_bleu(&s(&["the cat sat on a mat"]), &s(&["the cat sat on the mat"])).unwrap();
        let want = 100.0 * ((5.0f64 / 6.0) * 0.6 * 0.5 * (1.0 / 3.0)).powf(0.25);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        // Brevity: 4-token candidate, 6-token reference, all n-grams match.
        let got = corpus_bleu(&s(&["the cat sat on"]), &s(&["the cat sat on the mat"])).unwrap();
        assert!((got - 100.0 * (1.0f64 - 6.0 / 4.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn evaluate_perfect_and_empty() {
        let corpus = two_dialogue_corpus();
        let gold: Vec<Prediction> = corpus
            .agent_turns()
            .map(|t| Prediction {
                dial_id: t.dialogue.dial_id.clone(),
                turn_index: t.turn_index,
                grounding_pred: t.grounding_text().to_string(),
                response_pred: t.response_text().to_string(),
                parse_error: None,
            })
            .collect();
        let r = evaluate(&gold, &corpus).unwrap();
        assert_eq!((r.em, r.f1), (100.0, 100.0));
        assert!((r.bleu - 100.0).abs() < 1e-9);
        assert_eq!(r.n_examples, corpus.num_agent_turns());
        assert_eq!(r.n_parse_failures, 0);

        let empty: Vec<Prediction> = gold
            .iter()
            .map(|p| Prediction {
                grounding_pred: String::new(),
                response_pred: String::new(),
                parse_error: Some(crate::taskbuilder::ParseError::MissingGroundingMarker),
                ..p.clone()
            })
            .collect();
        let r = evaluate(&empty, &corpus).unwrap();
        assert_eq!((r.em, r.f1, r.bleu), (0.0, 0.0, 0.0));
        assert_eq!(r.n_parse_failures, gold.len());

        let stray = vec![Prediction { dial_id: "nope".into(), ..gold[0].clone() }];
        assert!(matches!(evaluate(&stray, &corpus), Err(MetricsError::UnresolvedPrediction { .. })));
    }

    #[test]
    fn table_round_trip_and_merge() {
        let row = |label: &str, fraction: &str, em: f64| TableRow {
            label: label.into(),
            fraction: fraction.into(),
            em,
            f1: em,
            bleu: 1.5,
            n: 10,
            parse_failures: 0,
        };
        let rows = vec![row("b", "1/4", 1.0), row("a", "1/8", 2.0), row("a", "1/32", 3.0), row("a", "1/8", 4.0)];
        let text = table_text(&rows);
        assert!(text.starts_with(TABLE_HEADER));
        assert_eq!(parse_table(&text).unwrap(), rows);
        let (merged, warnings) = merge_rows(rows);
        assert_eq!(warnings.len(), 1);
        let keys: Vec<(String, String, f64)> = merged.iter().map(|r| (r.label.clone(), r.fraction.clone(), r.em)).collect();
        assert_eq!(
            keys,
            vec![("a".into(), "1/32".into(), 3.0), ("a".into(), "1/8".into(), 4.0), ("b".into(), "1/4".into(), 1.0)]
        );
        assert_eq!(table_text(&merge_rows(Vec::new()).0), format!("{TABLE_HEADER}\n"));
        assert!(parse_table("x\ty").is_err());
    }

    proptest! {
        #[test]
        fn self_match_and_symmetry(a in "[a-zA-Z ,.!]{0,30}", b in "[a-zA-Z ,.!]{0,30}") {
            prop_assert_eq!(exact_match(&a, &a), 1.0);
            prop_assert_eq!(token_f1(&a, &a), 1.0);
            prop_assert_eq!(exact_match(&a, &b), exact_match(&b, &a));
            prop_assert!((token_f1(&a, &b) - token_f1(&b, &a)).abs() < 1e-12);
            prop_assert_eq!(normalize(&normalize(&a)), normalize(&a));
            if exact_match(&a, &b) == 1.0 {
                prop_assert_eq!(token_f1(&a, &b), 1.0);
            }
        }

        #[test]
        fn bleu_permutation_invariant(words in prop::collection::vec("[a-d]{1,2}( [a-d]{1,2}){0,6}", 2..6), shift in 0usize..5) {
            let preds = words.clone();
            let mut golds = words.clone();
            golds.rotate_left(1);
            let mut p2 = preds.clone();
            let mut g2 = golds.clone();
            let k = shift % preds.len();
            p2.rotate_left(k);
            g2.rotate_left(k);
            let a = corpus_bleu(&preds, &golds).unwrap();
            let b = corpus_bleu(&p2, &g2).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((0.0..=100.0 + 1e-9).contains(&a));
        }
    }
}
