use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, CorpusError};

/// Share of training dialogues kept by a low-resource split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fraction {
    OneThirtySecond,
    OneSixteenth,
    OneEighth,
    OneQuarter,
    Full,
}

impl Fraction {
    pub const ALL: [Fraction; 5] =
        [Fraction::OneThirtySecond, Fraction::OneSixteenth, Fraction::OneEighth, Fraction::OneQuarter, Fraction::Full];

    pub fn denominator(self) -> usize {
        match self {
            Fraction::OneThirtySecond => 32,
            Fraction::OneSixteenth => 16,
            Fraction::OneEighth => 8,
            Fraction::OneQuarter => 4,
            Fraction::Full => 1,
        }
    }

    pub fn value(self) -> f64 {
        1.0 / self.denominator() as f64
    }

    /// `⌈n / denominator⌉`
    pub fn keep_count(self, n: usize) -> usize {
        n.div_ceil(self.denominator())
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fraction::Full => write!(f, "1"),
            other => write!(f, "1/{}", other.denominator()),
        }
    }
}

impl FromStr for Fraction {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        Fraction::ALL
            .into_iter()
            .find(|f| f.to_string() == t || (*f == Fraction::Full && t == "1/1"))
            .ok_or_else(|| CorpusError::InvalidFraction(s.to_string()))
    }
}

/// Seeded shuffle of the dialogues, keeping the first `⌈fraction · N⌉`.
///
/// The permutation depends only on `seed` and `N`, so smaller fractions are
/// prefixes of larger ones. All documents are kept.
pub fn lowres_split(corpus: &Corpus, fraction: Fraction, seed: u64) -> Result<Corpus, CorpusError> {
    let n = corpus.dialogues.len();
    if n == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let dialogues = order[..fraction.keep_count(n)].iter().map(|&i| corpus.dialogues[i].clone()).collect();
    Ok(Corpus { documents: corpus.documents.clone(), dialogues })
}
