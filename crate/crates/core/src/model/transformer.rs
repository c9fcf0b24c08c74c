//! Encoder-decoder forward pass, cross-entropy loss and the matching backward pass.

use rand::RngCore;

use super::layers::{
    apply_mask, attention_backward, attention_forward, check_tau, dropout_mask, ff_backward, ff_forward,
    layer_norm_backward, layer_norm_forward, project_to_vocab, project_to_vocab_backward, AttnCache,
    AttentionOutput, FfCache, NormCache,
};
use super::params::{ModelParams, Tensor};
use super::{ModelConfig, ModelError};
use crate::tensor::{add, add_assign, Float};

/// Token fed to the decoder before the first target token.
pub const DECODER_START_ID: u32 = 0;

/// Logits over the vocabulary, one row per decoder position.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub data: Vec<T>,
    pub rows: usize,
    pub vocab: usize,
}

impl<T: Float> Logits<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

/// `[start] ++ target[..n-1]`: teacher-forcing decoder inputs for `target`.
pub fn shift_right(target: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(target.len());
    if !target.is_empty() {
        out.push(DECODER_START_ID);
        out.extend_from_slice(&target[..target.len() - 1]);
    }
    out
}

struct EncLayerCache<T> {
    norm1: NormCache<T>,
    attn: AttnCache<T>,
    drop1: Option<Vec<T>>,
    norm2: NormCache<T>,
    ff: FfCache<T>,
    drop2: Option<Vec<T>>,
}

/// Saved activations of one encoder pass.
pub struct EncoderState<T> {
    pub memory: Vec<T>,
    pub len: usize,
    ids: Vec<u32>,
    embed_drop: Option<Vec<T>>,
    layers: Vec<EncLayerCache<T>>,
    final_norm: NormCache<T>,
}

struct DecLayerCache<T> {
    norm1: NormCache<T>,
    self_attn: AttnCache<T>,
    drop1: Option<Vec<T>>,
    norm2: NormCache<T>,
    cross_attn: AttnCache<T>,
    drop2: Option<Vec<T>>,
    norm3: NormCache<T>,
    ff: FfCache<T>,
    drop3: Option<Vec<T>>,
}

/// Saved activations of one decoder pass.
pub struct DecoderState<T> {
    pub hidden: Vec<T>,
    pub len: usize,
    memory_len: usize,
    ids: Vec<u32>,
    embed_drop: Option<Vec<T>>,
    layers: Vec<DecLayerCache<T>>,
    final_norm: NormCache<T>,
}

impl<T: Float> DecoderState<T> {
    /// Cross-attention probabilities of every decoder layer.
    pub fn cross_attention(&self) -> Vec<AttentionOutput<T>> {
        self.layers.iter().map(|l| l.cross_attn.output()).collect()
    }

    /// Causal self-attention probabilities of every decoder layer.
    pub fn self_attention(&self) -> Vec<AttentionOutput<T>> {
        self.layers.iter().map(|l| l.self_attn.output()).collect()
    }
}

impl<T: Float> EncoderState<T> {
    pub fn self_attention(&self) -> Vec<AttentionOutput<T>> {
        self.layers.iter().map(|l| l.attn.output()).collect()
    }
}

fn check_ids(ids: &[u32], cfg: &ModelConfig) -> Result<(), ModelError> {
    if ids.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if ids.len() > cfg.max_positions {
        return Err(ModelError::LengthOverflow { len: ids.len(), max: cfg.max_positions });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange { id, vocab_size: cfg.vocab_size });
    }
    Ok(())
}

fn embed<T: Float>(ids: &[u32], table: &Tensor<T>, positions: &Tensor<T>, d: usize) -> Vec<T> {
    let mut x = Vec::with_capacity(ids.len() * d);
    for (pos, &id) in ids.iter().enumerate() {
        let tok = &table.data[id as usize * d..(id as usize + 1) * d];
        let p = &positions.data[pos * d..(pos + 1) * d];
        x.extend(tok.iter().zip(p).map(|(a, b)| *a + *b));
    }
    x
}

fn embed_backward<T: Float>(ids: &[u32], dx: &[T], d_table: &mut Tensor<T>, d_positions: &mut Tensor<T>, d: usize) {
    for (pos, &id) in ids.iter().enumerate() {
        let g = &dx[pos * d..(pos + 1) * d];
        add_assign(&mut d_table.data[id as usize * d..(id as usize + 1) * d], g);
        add_assign(&mut d_positions.data[pos * d..(pos + 1) * d], g);
    }
}

/// Runs the encoder. Self-attention always uses temperature 1.
pub fn encode<T: Float>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input_ids: &[u32],
    mut rng: Option<&mut (dyn RngCore + '_)>,
) -> Result<EncoderState<T>, ModelError> {
    check_ids(input_ids, cfg)?;
    let d = cfg.d_model;
    let len = input_ids.len();
    let rate = cfg.dropout_rate;
    let mut x = embed(input_ids, &params.token_embedding, &params.encoder_positions, d);
    let embed_drop = dropout_mask(x.len(), rate, rng.as_deref_mut());
    apply_mask(&mut x, &embed_drop);

    let mut layers = Vec::with_capacity(params.encoder_layers.len());
    for layer in &params.encoder_layers {
        let (h1, norm1) = layer_norm_forward(&layer.attn_norm, &x, len);
        let (mut a, attn) = attention_forward(&layer.self_attn, &h1, len, &h1, len, cfg.n_heads, false, T::one());
        let drop1 = dropout_mask(a.len(), rate, rng.as_deref_mut());
        apply_mask(&mut a, &drop1);
        add_assign(&mut x, &a);
        let (h2, norm2) = layer_norm_forward(&layer.ff_norm, &x, len);
        let (mut f, ff) = ff_forward(&layer.ff, &h2, len);
        let drop2 = dropout_mask(f.len(), rate, rng.as_deref_mut());
        apply_mask(&mut f, &drop2);
        add_assign(&mut x, &f);
        layers.push(EncLayerCache { norm1, attn, drop1, norm2, ff, drop2 });
    }
    let (memory, final_norm) = layer_norm_forward(&params.encoder_norm, &x, len);
    Ok(EncoderState { memory, len, ids: input_ids.to_vec(), embed_drop, layers, final_norm })
}

/// Runs the decoder over `decoder_ids` attending to `memory`.
///
/// Causal self-attention uses temperature 1; every cross-attention uses `tau`.
pub fn decode<T: Float>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    memory: &[T],
    memory_len: usize,
    decoder_ids: &[u32],
    tau: T,
    mut rng: Option<&mut (dyn RngCore + '_)>,
) -> Result<DecoderState<T>, ModelError> {
    check_tau(tau)?;
    check_ids(decoder_ids, cfg)?;
    let d = cfg.d_model;
    let len = decoder_ids.len();
    let rate = cfg.dropout_rate;
    let mut y = embed(decoder_ids, &params.token_embedding, &params.decoder_positions, d);
    let embed_drop = dropout_mask(y.len(), rate, rng.as_deref_mut());
    apply_mask(&mut y, &embed_drop);

    let mut layers = Vec::with_capacity(params.decoder_layers.len());
    for layer in &params.decoder_layers {
        let (h1, norm1) = layer_norm_forward(&layer.self_norm, &y, len);
        let (mut s, self_attn) = attention_forward(&layer.self_attn, &h1, len, &h1, len, cfg.n_heads, true, T::one());
        let drop1 = dropout_mask(s.len(), rate, rng.as_deref_mut());
        apply_mask(&mut s, &drop1);
        add_assign(&mut y, &s);

        let (h2, norm2) = layer_norm_forward(&layer.cross_norm, &y, len);
        let (mut c, cross_attn) =
            attention_forward(&layer.cross_attn, &h2, len, memory, memory_len, cfg.n_heads, false, tau);
        let drop2 = dropout_mask(c.len(), rate, rng.as_deref_mut());
        apply_mask(&mut c, &drop2);
        add_assign(&mut y, &c);

        let (h3, norm3) = layer_norm_forward(&layer.ff_norm, &y, len);
        let (mut f, ff) = ff_forward(&layer.ff, &h3, len);
        let drop3 = dropout_mask(f.len(), rate, rng.as_deref_mut());
        apply_mask(&mut f, &drop3);
        add_assign(&mut y, &f);
        layers.push(DecLayerCache { norm1, self_attn, drop1, norm2, cross_attn, drop2, norm3, ff, drop3 });
    }
    let (hidden, final_norm) = layer_norm_forward(&params.decoder_norm, &y, len);
    Ok(DecoderState { hidden, len, memory_len, ids: decoder_ids.to_vec(), embed_drop, layers, final_norm })
}

/// Logits for every row of `hidden`.
pub fn logits_for<T: Float>(params: &ModelParams<T>, cfg: &ModelConfig, hidden: &[T], rows: usize) -> Logits<T> {
    let data = project_to_vocab(hidden, rows, cfg.d_model, &params.token_embedding.data, cfg.vocab_size);
    Logits { data, rows, vocab: cfg.vocab_size }
}

/// Full forward pass: `(target_len, vocab_size)` logits for the decoder inputs.
///
/// Dropout is applied only when `rng` is supplied (training mode).
pub fn forward<T: Float>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input_ids: &[u32],
    decoder_ids: &[u32],
    tau: T,
    mut rng: Option<&mut (dyn RngCore + '_)>,
) -> Result<Logits<T>, ModelError> {
    check_tau(tau)?;
    let enc = encode(params, cfg, input_ids, rng.as_deref_mut())?;
    let dec = decode(params, cfg, &enc.memory, enc.len, decoder_ids, tau, rng)?;
    Ok(logits_for(params, cfg, &dec.hidden, dec.len))
}

/// Mean token negative log-likelihood of `targets` given `logits`, and its gradient
/// with respect to the logits (already divided by the token count).
pub fn cross_entropy<T: Float>(logits: &Logits<T>, targets: &[u32]) -> (T, Vec<T>) {
    let n = T::of(targets.len() as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.data.len()];
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|z| (*z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[t as usize];
        let g = &mut grad[i * logits.vocab..(i + 1) * logits.vocab];
        for (gv, z) in g.iter_mut().zip(row) {
            *gv = (*z - log_z).exp() / n;
        }
        g[t as usize] -= T::one() / n;
    }
    (loss / n, grad)
}

/// Teacher-forced loss of `target_ids` plus reverse-mode gradients.
///
/// Gradients are multiplied by `scale` and added into `grads`. Returns the mean
/// per-token negative log-likelihood.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradients<T: Float>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input_ids: &[u32],
    target_ids: &[u32],
    tau: T,
    mut rng: Option<&mut (dyn RngCore + '_)>,
    grads: &mut ModelParams<T>,
    scale: T,
) -> Result<T, ModelError> {
    if target_ids.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    check_tau(tau)?;
    let decoder_ids = shift_right(target_ids);
    let enc = encode(params, cfg, input_ids, rng.as_deref_mut())?;
    let dec = decode(params, cfg, &enc.memory, enc.len, &decoder_ids, tau, rng)?;
    let logits = logits_for(params, cfg, &dec.hidden, dec.len);
    let (loss, mut dlogits) = cross_entropy(&logits, target_ids);
    if scale != T::one() {
        dlogits.iter_mut().for_each(|g| *g *= scale);
    }
    let dhidden = project_to_vocab_backward(
        &dec.hidden,
        dec.len,
        cfg.d_model,
        &params.token_embedding.data,
        cfg.vocab_size,
        &dlogits,
        &mut grads.token_embedding.data,
    );
    let dmemory = decoder_backward(params, cfg, &dec, &dhidden, grads);
    encoder_backward(params, cfg, &enc, &dmemory, grads);
    Ok(loss)
}

fn decoder_backward<T: Float>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    state: &DecoderState<T>,
    dhidden: &[T],
    grads: &mut ModelParams<T>,
) -> Vec<T> {
    let len = state.len;
    let d = cfg.d_model;
    let mut dmemory = vec![T::zero(); state.memory_len * d];
    let mut dy = layer_norm_backward(&params.decoder_norm, &mut grads.decoder_norm, &state.final_norm, dhidden, len);
    for (i, cache) in state.layers.iter().enumerate().rev() {
        let layer = &params.decoder_layers[i];
        let g = &mut grads.decoder_layers[i];

        let mut df = dy.clone();
        apply_mask(&mut df, &cache.drop3);
        let dh3 = ff_backward(&layer.ff, &mut g.ff, &cache.ff, &df, len);
        let dn3 = layer_norm_backward(&layer.ff_norm, &mut g.ff_norm, &cache.norm3, &dh3, len);
        add_assign(&mut dy, &dn3);

        let mut dc = dy.clone();
        apply_mask(&mut dc, &cache.drop2);
        let (dh2, dmem) = attention_backward(&layer.cross_attn, &mut g.cross_attn, &cache.cross_attn, &dc);
        add_assign(&mut dmemory, &dmem);
        let dn2 = layer_norm_backward(&layer.cross_norm, &mut g.cross_norm, &cache.norm2, &dh2, len);
        add_assign(&mut dy, &dn2);

        let mut ds = dy.clone();
        apply_mask(&mut ds, &cache.drop1);
        let (dq, dkv) = attention_backward(&layer.self_attn, &mut g.self_attn, &cache.self_attn, &ds);
        let dh1 = add(&dq, &dkv);
        let dn1 = layer_norm_backward(&layer.self_norm, &mut g.self_norm, &cache.norm1, &dh1, len);
        add_assign(&mut dy, &dn1);
    }
    apply_mask(&mut dy, &state.embed_drop);
    embed_backward(&state.ids, &dy, &mut grads.token_embedding, &mut grads.decoder_positions, d);
    dmemory
}

fn encoder_backward<T: Float>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    state: &EncoderState<T>,
    dmemory: &[T],
    grads: &mut ModelParams<T>,
) {
    let len = state.len;
    let d = cfg.d_model;
    let mut dx = layer_norm_backward(&params.encoder_norm, &mut grads.encoder_norm, &state.final_norm, dmemory, len);
    for (i, cache) in state.layers.iter().enumerate().rev() {
        let layer = &params.encoder_layers[i];
        let g = &mut grads.encoder_layers[i];

        let mut df = dx.clone();
        apply_mask(&mut df, &cache.drop2);
        let dh2 = ff_backward(&layer.ff, &mut g.ff, &cache.ff, &df, len);
        let dn2 = layer_norm_backward(&layer.ff_norm, &mut g.ff_norm, &cache.norm2, &dh2, len);
        add_assign(&mut dx, &dn2);

        let mut da = dx.clone();
        apply_mask(&mut da, &cache.drop1);
        let (dq, dkv) = attention_backward(&layer.self_attn, &mut g.self_attn, &cache.attn, &da);
        let dh1 = add(&dq, &dkv);
        let dn1 = layer_norm_backward(&layer.attn_norm, &mut g.attn_norm, &cache.norm1, &dh1, len);
        add_assign(&mut dx, &dn1);
    }
    apply_mask(&mut dx, &state.embed_drop);
    embed_backward(&state.ids, &dx, &mut grads.token_embedding, &mut grads.encoder_positions, d);
}
