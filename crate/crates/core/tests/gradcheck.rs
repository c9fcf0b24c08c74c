use docdial::model::{init_model, loss_and_gradients, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 32,
        vocab_size: 32,
        max_positions: 16,
        dropout_rate: 0.0,
        init_seed: 11,
    }
}

fn loss(params: &ModelParams<f64>, cfg: &ModelConfig, input: &[u32], target: &[u32], tau: f64) -> f64 {
    let mut scratch = ModelParams::zeros(cfg);
    loss_and_gradients(params, cfg, input, target, tau, None, &mut scratch, 1.0).unwrap()
}

fn check(tau: f64, seed: u64) {
    let cfg = config();
    let mut params: ModelParams<f64> = init_model(&cfg).unwrap();
    // Perturb layer norms away from their identity init so their gradients are exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in params.named_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
            t.data.iter_mut().for_each(|x| *x += rng.random_range(-0.2..0.2));
        }
    }
    let input: Vec<u32> = (0..9).map(|_| rng.random_range(3..32)).collect();
    let target: Vec<u32> = (0..6).map(|_| rng.random_range(1..32)).collect();

    let mut grads = ModelParams::zeros(&cfg);
    loss_and_gradients(&params, &cfg, &input, &target, tau, None, &mut grads, 1.0).unwrap();
    let analytic: Vec<(String, Vec<f64>)> =
        grads.named().into_iter().map(|(n, t)| (n, t.data.clone())).collect();

    let h = 1e-3;
    let mut worst = 0.0f64;
    for k in 0..20 {
        let ti = rng.random_range(0..analytic.len());
        let (name, g) = &analytic[ti];
        let j = rng.random_range(0..g.len());
        let probe = |delta: f64| {
            let mut p = params.clone();
            p.named_mut()[ti].1.data[j] += delta;
            loss(&p, &cfg, &input, &target, tau)
        };
        let numeric = (probe(h) - probe(-h)) / (2.0 * h);
        let rel = (numeric - g[j]).abs() / numeric.abs().max(g[j].abs()).max(1e-6);
        assert!(rel < 1e-4, "coordinate {k}: {name}[{j}] analytic {} numeric {numeric} rel {rel}", g[j]);
        worst = worst.max(rel);
    }
    eprintln!("tau {tau}: worst relative error {worst:.2e}");
}

#[test]
fn gradients_match_central_differences() {
    check(1.0, 1);
}

#[test]
fn gradients_match_with_tempered_cross_attention() {
    check(0.7, 2);
}
