//! Forward and reverse-mode passes of the building blocks.
//!
//! Activations are row-major `rows × width` buffers. Each `*_forward` returns the
//! output together with whatever its `*_backward` needs; backward functions add
//! parameter gradients into a same-shaped gradient tree and return the input
//! gradient.

use rand::{Rng, RngCore};

use super::params::{Attention, FeedForward, LayerNorm, Linear};
use super::ModelError;
use crate::tensor::{gemm, matmul, matmul_a_bt, matmul_at_b_acc, Float, View, ViewMut};

const NORM_EPS: f64 = 1e-5;

/// Attention probabilities of one attention call, with the mixed values.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    /// `n_heads × query_len × key_len`, each row a probability vector.
    pub weights: Vec<T>,
    /// `query_len × d_model` head-concatenated mixtures, before the output projection.
    pub values: Vec<T>,
    pub n_heads: usize,
    pub query_len: usize,
    pub key_len: usize,
}

impl<T: Float> AttentionOutput<T> {
    pub fn row(&self, head: usize, query: usize) -> &[T] {
        let start = (head * self.query_len + query) * self.key_len;
        &self.weights[start..start + self.key_len]
    }
}

/// Softmax of `z / tau`, max-subtracted.
pub fn tempered_softmax<T: Float>(logits: &[T], tau: T) -> Result<Vec<T>, ModelError> {
    check_tau(tau)?;
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(ModelError::NonFiniteLogits);
    }
    let mut out = logits.to_vec();
    softmax_prefix_in_place(&mut out, tau, logits.len());
    Ok(out)
}

pub(crate) fn check_tau<T: Float>(tau: T) -> Result<(), ModelError> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(ModelError::InvalidTemperature(tau.as_f64()));
    }
    Ok(())
}

/// Tempered softmax over `row[..valid]`; entries past `valid` become exactly zero.
fn softmax_prefix_in_place<T: Float>(row: &mut [T], tau: T, valid: usize) {
    let inv_tau = T::one() / tau;
    let max = row[..valid].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row[..valid].iter_mut() {
        *x = ((*x - max) * inv_tau).exp();
        sum += *x;
    }
    for x in row[..valid].iter_mut() {
        *x /= sum;
    }
    for x in row[valid..].iter_mut() {
        *x = T::zero();
    }
}

pub(crate) fn linear_forward<T: Float>(lin: &Linear<T>, x: &[T], rows: usize) -> Vec<T> {
    let (d_in, d_out) = (lin.d_in(), lin.d_out());
    let mut y = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        y.extend_from_slice(&lin.bias.data);
    }
    gemm(T::one(), View::new(x, rows, d_in), View::new(&lin.weight.data, d_in, d_out), T::one(), ViewMut::new(&mut y, rows, d_out));
    y
}

pub(crate) fn linear_backward<T: Float>(
    lin: &Linear<T>,
    grad: &mut Linear<T>,
    x: &[T],
    rows: usize,
    dy: &[T],
) -> Vec<T> {
    let (d_in, d_out) = (lin.d_in(), lin.d_out());
    matmul_at_b_acc(x, rows, d_in, dy, d_out, &mut grad.weight.data);
    for r in 0..rows {
        for (g, d) in grad.bias.data.iter_mut().zip(&dy[r * d_out..(r + 1) * d_out]) {
            *g += *d;
        }
    }
    matmul_a_bt(dy, rows, d_out, &lin.weight.data, d_in)
}

pub(crate) struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Float>(ln: &LayerNorm<T>, x: &[T], rows: usize) -> (Vec<T>, NormCache<T>) {
    let d = ln.gamma.len();
    let eps = T::of(NORM_EPS);
    let n = T::of(d as f64);
    let mut y = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = h * ln.gamma.data[j] + ln.beta.data[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<T: Float>(
    ln: &LayerNorm<T>,
    grad: &mut LayerNorm<T>,
    cache: &NormCache<T>,
    dy: &[T],
    rows: usize,
) -> Vec<T> {
    let d = ln.gamma.len();
    let n = T::of(d as f64);
    let mut dx = vec![T::zero(); rows * d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            grad.gamma.data[j] += g[j] * xh[j];
            grad.beta.data[j] += g[j];
            dxhat[j] = g[j] * ln.gamma.data[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        let is = cache.inv_std[r];
        for j in 0..d {
            dx[r * d + j] = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// `tanh` through a single `exp`; libm's `tanhf` is several times slower.
fn fast_tanh<T: Float>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

/// Tanh-approximated GeLU. Returns the activation and the inner tanh.
fn gelu<T: Float>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let t = fast_tanh(c * (x + k * x * x * x));
    (T::of(0.5) * x * (T::one() + t), t)
}

fn gelu_grad<T: Float>(x: T, t: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub(crate) struct FfCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
    tanh: Vec<T>,
    act: Vec<T>,
}

pub(crate) fn ff_forward<T: Float>(ff: &FeedForward<T>, x: &[T], rows: usize) -> (Vec<T>, FfCache<T>) {
    let pre = linear_forward(&ff.up, x, rows);
    let (act, tanh): (Vec<T>, Vec<T>) = pre.iter().map(|v| gelu(*v)).unzip();
    let out = linear_forward(&ff.down, &act, rows);
    (out, FfCache { input: x.to_vec(), pre, tanh, act })
}

pub(crate) fn ff_backward<T: Float>(
    ff: &FeedForward<T>,
    grad: &mut FeedForward<T>,
    cache: &FfCache<T>,
    dy: &[T],
    rows: usize,
) -> Vec<T> {
    let mut dact = linear_backward(&ff.down, &mut grad.down, &cache.act, rows, dy);
    for ((g, p), t) in dact.iter_mut().zip(&cache.pre).zip(&cache.tanh) {
        *g *= gelu_grad(*p, *t);
    }
    linear_backward(&ff.up, &mut grad.up, &cache.input, rows, &dact)
}

pub(crate) struct AttnCache<T> {
    xq: Vec<T>,
    xkv: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `n_heads × tq × tk`
    probs: Vec<T>,
    ctx: Vec<T>,
    tq: usize,
    tk: usize,
    n_heads: usize,
    tau: T,
}

impl<T: Float> AttnCache<T> {
    pub(crate) fn output(&self) -> AttentionOutput<T> {
        AttentionOutput {
            weights: self.probs.clone(),
            values: self.ctx.clone(),
            n_heads: self.n_heads,
            query_len: self.tq,
            key_len: self.tk,
        }
    }
}

/// Multi-head attention of `xq` (`tq` rows) over `xkv` (`tk` rows).
///
/// Scores are `q·k/√d_head` and go through [`tempered_softmax`] with `tau`.
/// With `causal`, query `i` only sees keys `0..=i`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<T: Float>(
    attn: &Attention<T>,
    xq: &[T],
    tq: usize,
    xkv: &[T],
    tk: usize,
    n_heads: usize,
    causal: bool,
    tau: T,
) -> (Vec<T>, AttnCache<T>) {
    let d = attn.query.d_out();
    let dh = d / n_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let q = linear_forward(&attn.query, xq, tq);
    let k = linear_forward(&attn.key, xkv, tk);
    let v = linear_forward(&attn.value, xkv, tk);
    let mut probs = vec![T::zero(); n_heads * tq * tk];
    let mut ctx = vec![T::zero(); tq * d];
    for h in 0..n_heads {
        let block = &mut probs[h * tq * tk..(h + 1) * tq * tk];
        gemm(
            scale,
            View::cols_of(&q, tq, d, h * dh, dh),
            View::cols_of(&k, tk, d, h * dh, dh).t(),
            T::zero(),
            ViewMut::new(block, tq, tk),
        );
        for i in 0..tq {
            let valid = if causal { (i + 1).min(tk) } else { tk };
            softmax_prefix_in_place(&mut block[i * tk..(i + 1) * tk], tau, valid);
        }
        gemm(
            T::one(),
            View::new(block, tq, tk),
            View::cols_of(&v, tk, d, h * dh, dh),
            T::zero(),
            ViewMut::cols_of(&mut ctx, tq, d, h * dh, dh),
        );
    }
    let out = linear_forward(&attn.output, &ctx, tq);
    let cache = AttnCache { xq: xq.to_vec(), xkv: xkv.to_vec(), q, k, v, probs, ctx, tq, tk, n_heads, tau };
    (out, cache)
}

/// Returns `(d xq, d xkv)`.
pub(crate) fn attention_backward<T: Float>(
    attn: &Attention<T>,
    grad: &mut Attention<T>,
    cache: &AttnCache<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let (tq, tk, n_heads) = (cache.tq, cache.tk, cache.n_heads);
    let d = attn.query.d_out();
    let dh = d / n_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let inv_tau = T::one() / cache.tau;

    let dctx = linear_backward(&attn.output, &mut grad.output, &cache.ctx, tq, dy);
    let mut dq = vec![T::zero(); tq * d];
    let mut dk = vec![T::zero(); tk * d];
    let mut dv = vec![T::zero(); tk * d];
    let mut dp = vec![T::zero(); tq * tk];
    for h in 0..n_heads {
        let p = &cache.probs[h * tq * tk..(h + 1) * tq * tk];
        // dP = dctx_h · v_hᵀ
        gemm(
            T::one(),
            View::cols_of(&dctx, tq, d, h * dh, dh),
            View::cols_of(&cache.v, tk, d, h * dh, dh).t(),
            T::zero(),
            ViewMut::new(&mut dp, tq, tk),
        );
        // dv_h = Pᵀ · dctx_h
        gemm(
            T::one(),
            View::new(p, tq, tk).t(),
            View::cols_of(&dctx, tq, d, h * dh, dh),
            T::zero(),
            ViewMut::cols_of(&mut dv, tk, d, h * dh, dh),
        );
        // Softmax Jacobian with the 1/tau factor; masked entries have p = 0.
        for i in 0..tq {
            let pr = &p[i * tk..(i + 1) * tk];
            let dr = &mut dp[i * tk..(i + 1) * tk];
            let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
            for (g, pv) in dr.iter_mut().zip(pr) {
                *g = *pv * (*g - dot) * inv_tau;
            }
        }
        gemm(
            scale,
            View::new(&dp, tq, tk),
            View::cols_of(&cache.k, tk, d, h * dh, dh),
            T::zero(),
            ViewMut::cols_of(&mut dq, tq, d, h * dh, dh),
        );
        gemm(
            scale,
            View::new(&dp, tq, tk).t(),
            View::cols_of(&cache.q, tq, d, h * dh, dh),
            T::zero(),
            ViewMut::cols_of(&mut dk, tk, d, h * dh, dh),
        );
    }
    let dxq = linear_backward(&attn.query, &mut grad.query, &cache.xq, tq, &dq);
    let mut dxkv = linear_backward(&attn.key, &mut grad.key, &cache.xkv, tk, &dk);
    let dxv = linear_backward(&attn.value, &mut grad.value, &cache.xkv, tk, &dv);
    crate::tensor::add_assign(&mut dxkv, &dxv);
    (dxq, dxkv)
}

/// Inverted-dropout scale factors, or `None` when inactive.
pub(crate) fn dropout_mask<T: Float>(len: usize, rate: f64, rng: Option<&mut (dyn RngCore + '_)>) -> Option<Vec<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - rate));
    Some((0..len).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect())
}

pub(crate) fn apply_mask<T: Float>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, s) in x.iter_mut().zip(m) {
            *v *= *s;
        }
    }
}

/// `h · Eᵀ` for the tied output projection.
pub(crate) fn project_to_vocab<T: Float>(hidden: &[T], rows: usize, d: usize, embedding: &[T], vocab: usize) -> Vec<T> {
    matmul_a_bt(hidden, rows, d, embedding, vocab)
}

/// Backward of [`project_to_vocab`]: accumulates into `d_embedding`, returns `d hidden`.
pub(crate) fn project_to_vocab_backward<T: Float>(
    hidden: &[T],
    rows: usize,
    d: usize,
    embedding: &[T],
    vocab: usize,
    dlogits: &[T],
    d_embedding: &mut [T],
) -> Vec<T> {
    matmul_at_b_acc(dlogits, rows, vocab, hidden, d, d_embedding);
    matmul(dlogits, rows, vocab, embedding, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tempered_softmax_reference_values() {
        let p = tempered_softmax(&[1.0f64, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let p = tempered_softmax(&[1.0f64, 0.0], 0.5).unwrap();
        assert!((p[0] - 0.880_797_077_977_882_3).abs() < 1e-12);
        let p = tempered_softmax(&[0.0f64, 0.0], 0.3).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn tempered_softmax_rejects_bad_inputs() {
        assert!(matches!(tempered_softmax(&[1.0f64], 0.0), Err(ModelError::InvalidTemperature(_))));
        assert!(matches!(tempered_softmax(&[1.0f64], -1.0), Err(ModelError::InvalidTemperature(_))));
        assert!(matches!(tempered_softmax(&[f64::NAN, 1.0], 1.0), Err(ModelError::NonFiniteLogits)));
        assert!(matches!(tempered_softmax(&[f64::INFINITY], 1.0), Err(ModelError::NonFiniteLogits)));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h).0 - gelu(x - h).0) / (2.0 * h);
            assert!((fd - gelu_grad(x, gelu(x).1)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn fast_tanh_matches_libm() {
        for i in -400..=400 {
            let u = i as f64 * 0.05;
            assert!((fast_tanh(u) - u.tanh()).abs() < 1e-15, "u={u}");
        }
        assert_eq!(fast_tanh(200.0f32), 1.0);
        assert_eq!(fast_tanh(-200.0f32), -1.0);
    }

    #[test]
    fn causal_rows_zero_future() {
        let mut row = vec![0.3f64, 0.1, 5.0, 2.0];
        softmax_prefix_in_place(&mut row, 1.0, 2);
        assert_eq!(row[2], 0.0);
        assert_eq!(row[3], 0.0);
        assert!((row[0] + row[1] - 1.0).abs() < 1e-15);
    }
}
