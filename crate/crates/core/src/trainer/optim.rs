//! AdamW with bias correction, decoupled weight decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, grad_clip_norm: 1.0 }
    }
}

/// First/second moments shaped like the model, plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ModelParams<f32>,
    pub second_moment: ModelParams<f32>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(cfg: &ModelConfig) -> Self {
        OptimizerState { first_moment: ModelParams::zeros(cfg), second_moment: ModelParams::zeros(cfg), step: 0 }
    }
}

/// Global L2 norm over every gradient tensor, accumulated in f64.
pub fn global_norm(grads: &ModelParams<f32>) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// One AdamW update. Returns the gradient norm measured before clipping.
///
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`, with both terms using the old `p`.
pub fn optimizer_step(
    params: &mut ModelParams<f32>,
    state: &mut OptimizerState,
    grads: &ModelParams<f32>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<f64, TrainError> {
    for (name, t) in grads.named() {
        if let Some(i) = t.data.iter().position(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { step: state.step, tensor: name, index: i });
        }
    }
    let norm = global_norm(grads);
    let clip = if norm > cfg.grad_clip_norm { cfg.grad_clip_norm / norm } else { 1.0 };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    // With beta = 0 the correction is exactly 1; keep it so rather than 1 - 0^t.
    let bc1 = if cfg.beta1 == 0.0 { 1.0 } else { bc1 };
    let bc2 = if cfg.beta2 == 0.0 { 1.0 } else { bc2 };
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let (lr32, decay) = (lr as f32, (lr * cfg.weight_decay) as f32);
    let (inv_bc1, inv_bc2) = ((1.0 / bc1) as f32, (1.0 / bc2) as f32);
    let (eps, clip) = (cfg.eps as f32, clip as f32);

    let moments = state.first_moment.tensors_mut().into_iter().zip(state.second_moment.tensors_mut());
    for ((p, g), (m, v)) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(moments) {
        for i in 0..p.data.len() {
            let gi = g.data[i] * clip;
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            let m_hat = m.data[i] * inv_bc1;
            let v_hat = v.data[i] * inv_bc2;
            let old = p.data[i];
            p.data[i] = old - lr32 * m_hat / (v_hat.sqrt() + eps) - decay * old;
        }
    }
    Ok(norm)
}
