use docdial::decoder::{beam_search, greedy, log_softmax, BeamConfig, StepScorer};
use docdial::model::ModelError;
use docdial::tokenizer::ids::EOS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded random distributions keyed by the prefix.
struct RandomTable {
    vocab: usize,
    seed: u64,
}

impl StepScorer for RandomTable {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        let key = prefix.iter().fold(self.seed, |h, &t| h.wrapping_mul(0x100000001b3).wrapping_add(t as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f32> = (0..self.vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        Ok(log_softmax(&logits))
    }
}

/// Four tokens (EOS = 1). Greedy commits to 2 and finishes with probability 0.2;
/// beam width 2 prefers the two children of 3 at step 2 and ends at 0.0735.
struct PruningTrap;

impl StepScorer for PruningTrap {
    fn vocab_size(&self) -> usize {
        4
    }

    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        let tiny = 1e-9;
        let p: [f64; 4] = match prefix {
            [] => [tiny, 0.01, 0.5, 0.49],
            [2] => [0.4, tiny, 0.3, 0.3],
            [3] => [0.5, tiny, 0.5, tiny],
            [3, _] => [0.3, 0.1, 0.3, 0.3],
            _ => [tiny, 1.0, tiny, tiny],
        };
        Ok(p.iter().map(|x| x.ln()).collect())
    }
}

fn beam(k: usize, max_len: usize) -> BeamConfig {
    BeamConfig { beam_size: k, max_output_len: max_len, length_penalty: 0.0, inference_tau: 1.0 }
}

#[test]
fn beam_can_score_below_greedy_when_the_greedy_path_is_pruned() {
    let g = greedy(&mut PruningTrap, 6).unwrap();
    assert_eq!(g.tokens, vec![2, 0, EOS]);
    assert!((g.score.exp() - 0.2).abs() < 1e-6);
    let b = beam_search(&mut PruningTrap, &beam(2, 6)).unwrap();
    assert_eq!(b.tokens, vec![3, 0, 0, EOS]);
    assert!((b.score.exp() - 0.0735).abs() < 1e-6);
    // Width 3 still loses it: the early EOS retires into one of the slots.
    assert_eq!(beam_search(&mut PruningTrap, &beam(3, 6)).unwrap().tokens, b.tokens);
    let wide = beam_search(&mut PruningTrap, &beam(4, 6)).unwrap();
    assert_eq!(wide.tokens, g.tokens);
}

#[test]
fn beam_of_one_is_greedy_on_random_tables() {
    for seed in 0..500 {
        let mut t = RandomTable { vocab: 2 + seed as usize % 9, seed };
        let max_len = 2 + (seed as usize / 9) % 8;
        let g = greedy(&mut t, max_len).unwrap();
        let b = beam_search(&mut t, &beam(1, max_len)).unwrap();
        assert_eq!(b, g, "seed {seed}");
    }
}

#[test]
fn exhaustive_beam_dominates_finished_greedy() {
    for seed in 0..300 {
        let vocab = 2 + seed as usize % 4;
        let max_len = 2 + (seed as usize / 4) % 3;
        let mut t = RandomTable { vocab, seed };
        let g = greedy(&mut t, max_len).unwrap();
        if g.tokens.last() != Some(&EOS) {
            continue;
        }
        let b = beam_search(&mut t, &beam(vocab.pow(max_len as u32), max_len)).unwrap();
        assert!(b.score >= g.score, "seed {seed}: beam {} < greedy {}", b.score, g.score);
    }
}

/// The unrestricted claim "beam_size = k scores at least as well as greedy for
/// every input" fails for this search; see the pruning test above. Kept so the
/// gap stays visible: `cargo test --test decoding -- --ignored`.
#[test]
#[ignore = "not a property of beam search; counterexamples exist for every k >= 2"]
fn beam_never_scores_below_greedy() {
    for k in 2..=4 {
        for seed in 0..2000 {
            let mut t = RandomTable { vocab: 2 + seed as usize % 7, seed };
            let max_len = 2 + (seed as usize / 7) % 6;
            let g = greedy(&mut t, max_len).unwrap();
            let b = beam_search(&mut t, &beam(k, max_len)).unwrap();
            assert!(b.score >= g.score - 1e-12, "k {k} seed {seed}: beam {} < greedy {}", b.score, g.score);
        }
    }
}
