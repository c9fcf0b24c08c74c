use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::tensor::Float;

const INIT_STD: f64 = 0.02;

/// A named block of parameters with its logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Affine map `y = x·W + b` with `W` stored `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> Linear<T> {
    fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear { weight: Tensor::zeros(&[d_in, d_out]), bias: Tensor::zeros(&[d_out]) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Float> LayerNorm<T> {
    fn new(d: usize, gamma: T) -> Self {
        LayerNorm { gamma: Tensor::filled(&[d], gamma), beta: Tensor::zeros(&[d]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Float> Attention<T> {
    fn zeros(d: usize) -> Self {
        Attention {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub attn_norm: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub ff_norm: LayerNorm<T>,
    pub ff: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_norm: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub cross_norm: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub ff_norm: LayerNorm<T>,
    pub ff: FeedForward<T>,
}

/// Every learnable tensor of the encoder-decoder.
///
/// The token embedding table is shared by the encoder input, the decoder input
/// and the output projection. Prompt and marker tokens are ordinary rows of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub token_embedding: Tensor<T>,
    pub encoder_positions: Tensor<T>,
    pub decoder_positions: Tensor<T>,
    pub encoder_layers: Vec<EncoderLayer<T>>,
    pub encoder_norm: LayerNorm<T>,
    pub decoder_layers: Vec<DecoderLayer<T>>,
    pub decoder_norm: LayerNorm<T>,
}

impl<T: Float> ModelParams<T> {
    /// All-zero parameters with the shapes implied by `cfg` (used for gradients).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let ff = |d_ff| FeedForward { up: Linear::zeros(d, d_ff), down: Linear::zeros(d_ff, d) };
        ModelParams {
            token_embedding: Tensor::zeros(&[cfg.vocab_size, d]),
            encoder_positions: Tensor::zeros(&[cfg.max_positions, d]),
            decoder_positions: Tensor::zeros(&[cfg.max_positions, d]),
            encoder_layers: (0..cfg.n_enc_layers)
                .map(|_| EncoderLayer {
                    attn_norm: LayerNorm::new(d, T::zero()),
                    self_attn: Attention::zeros(d),
                    ff_norm: LayerNorm::new(d, T::zero()),
                    ff: ff(cfg.d_ff),
                })
                .collect(),
            encoder_norm: LayerNorm::new(d, T::zero()),
            decoder_layers: (0..cfg.n_dec_layers)
                .map(|_| DecoderLayer {
                    self_norm: LayerNorm::new(d, T::zero()),
                    self_attn: Attention::zeros(d),
                    cross_norm: LayerNorm::new(d, T::zero()),
                    cross_attn: Attention::zeros(d),
                    ff_norm: LayerNorm::new(d, T::zero()),
                    ff: ff(cfg.d_ff),
                })
                .collect(),
            decoder_norm: LayerNorm::new(d, T::zero()),
        }
    }

    /// Named tensors in manifest order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("encoder_positions".to_string(), &self.encoder_positions),
            ("decoder_positions".to_string(), &self.decoder_positions),
        ];
        for (i, l) in self.encoder_layers.iter().enumerate() {
            let p = format!("encoder.{i}");
            push_norm(&mut out, &format!("{p}.attn_norm"), &l.attn_norm);
            push_attn(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            push_norm(&mut out, &format!("{p}.ff_norm"), &l.ff_norm);
            push_linear(&mut out, &format!("{p}.ff.up"), &l.ff.up);
            push_linear(&mut out, &format!("{p}.ff.down"), &l.ff.down);
        }
        push_norm(&mut out, "encoder_norm", &self.encoder_norm);
        for (i, l) in self.decoder_layers.iter().enumerate() {
            let p = format!("decoder.{i}");
            push_norm(&mut out, &format!("{p}.self_norm"), &l.self_norm);
            push_attn(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            push_norm(&mut out, &format!("{p}.cross_norm"), &l.cross_norm);
            push_attn(&mut out, &format!("{p}.cross_attn"), &l.cross_attn);
            push_norm(&mut out, &format!("{p}.ff_norm"), &l.ff_norm);
            push_linear(&mut out, &format!("{p}.ff.up"), &l.ff.up);
            push_linear(&mut out, &format!("{p}.ff.down"), &l.ff.down);
        }
        push_norm(&mut out, "decoder_norm", &self.decoder_norm);
        out
    }

    /// Mutable tensors in manifest order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let this = self;
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("token_embedding".to_string(), &mut this.token_embedding),
            ("encoder_positions".to_string(), &mut this.encoder_positions),
            ("decoder_positions".to_string(), &mut this.decoder_positions),
        ];
        for (i, l) in this.encoder_layers.iter_mut().enumerate() {
            let p = format!("encoder.{i}");
            push_norm_mut(&mut out, &format!("{p}.attn_norm"), &mut l.attn_norm);
            push_attn_mut(&mut out, &format!("{p}.self_attn"), &mut l.self_attn);
            push_norm_mut(&mut out, &format!("{p}.ff_norm"), &mut l.ff_norm);
            push_linear_mut(&mut out, &format!("{p}.ff.up"), &mut l.ff.up);
            push_linear_mut(&mut out, &format!("{p}.ff.down"), &mut l.ff.down);
        }
        push_norm_mut(&mut out, "encoder_norm", &mut this.encoder_norm);
        for (i, l) in this.decoder_layers.iter_mut().enumerate() {
            let p = format!("decoder.{i}");
            push_norm_mut(&mut out, &format!("{p}.self_norm"), &mut l.self_norm);
            push_attn_mut(&mut out, &format!("{p}.self_attn"), &mut l.self_attn);
            push_norm_mut(&mut out, &format!("{p}.cross_norm"), &mut l.cross_norm);
            push_attn_mut(&mut out, &format!("{p}.cross_attn"), &mut l.cross_attn);
            push_norm_mut(&mut out, &format!("{p}.ff_norm"), &mut l.ff_norm);
            push_linear_mut(&mut out, &format!("{p}.ff.up"), &mut l.ff.up);
            push_linear_mut(&mut out, &format!("{p}.ff.down"), &mut l.ff.down);
        }
        push_norm_mut(&mut out, "decoder_norm", &mut this.decoder_norm);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }

    /// Ordered `(name, shape)` pairs.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.named().into_iter().map(|(n, t)| (n, t.shape.clone())).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Element-wise conversion to another float width.
    pub fn cast<U: Float>(&self, cfg: &ModelConfig) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(cfg);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d = U::of(s.as_f64());
            }
        }
        out
    }

    /// Seeded initialisation: N(0, 0.02²) everywhere, residual-output projections
    /// additionally scaled by `1/√(2·n_layers)` of their stack, zero biases and
    /// unit layer-norm gains.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut params = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let enc_scale = 1.0 / (2.0 * cfg.n_enc_layers.max(1) as f64).sqrt();
        let dec_scale = 1.0 / (2.0 * cfg.n_dec_layers.max(1) as f64).sqrt();
        for (name, t) in params.named_mut() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                continue;
            }
            if name.ends_with(".gamma") {
                t.data.iter_mut().for_each(|x| *x = T::one());
                continue;
            }
            let residual_out = name.ends_with("attn.output.weight") || name.ends_with("ff.down.weight");
            let std = if residual_out {
                INIT_STD * if name.starts_with("encoder.") { enc_scale } else { dec_scale }
            } else {
                INIT_STD
            };
            for x in t.data.iter_mut() {
                let z: f64 = normal.sample(&mut rng);
                *x = T::of(z * std);
            }
        }
        params
    }
}

fn push_linear_mut<'a, T>(out: &mut Vec<(String, &'a mut Tensor<T>)>, prefix: &str, lin: &'a mut Linear<T>) {
    out.push((format!("{prefix}.weight"), &mut lin.weight));
    out.push((format!("{prefix}.bias"), &mut lin.bias));
}

fn push_norm_mut<'a, T>(out: &mut Vec<(String, &'a mut Tensor<T>)>, prefix: &str, ln: &'a mut LayerNorm<T>) {
    out.push((format!("{prefix}.gamma"), &mut ln.gamma));
    out.push((format!("{prefix}.beta"), &mut ln.beta));
}

fn push_attn_mut<'a, T>(out: &mut Vec<(String, &'a mut Tensor<T>)>, prefix: &str, a: &'a mut Attention<T>) {
    push_linear_mut(out, &format!("{prefix}.query"), &mut a.query);
    push_linear_mut(out, &format!("{prefix}.key"), &mut a.key);
    push_linear_mut(out, &format!("{prefix}.value"), &mut a.value);
    push_linear_mut(out, &format!("{prefix}.output"), &mut a.output);
}

fn push_linear<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, lin: &'a Linear<T>) {
    out.push((format!("{prefix}.weight"), &lin.weight));
    out.push((format!("{prefix}.bias"), &lin.bias));
}

fn push_norm<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, ln: &'a LayerNorm<T>) {
    out.push((format!("{prefix}.gamma"), &ln.gamma));
    out.push((format!("{prefix}.beta"), &ln.beta));
}

fn push_attn<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, a: &'a Attention<T>) {
    push_linear(out, &format!("{prefix}.query"), &a.query);
    push_linear(out, &format!("{prefix}.key"), &a.key);
    push_linear(out, &format!("{prefix}.value"), &a.value);
    push_linear(out, &format!("{prefix}.output"), &a.output);
}
