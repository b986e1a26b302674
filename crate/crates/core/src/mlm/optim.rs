use serde::{Deserialize, Serialize};

use super::MlmError;
use crate::encoder::{EncoderParams, Gradients};

/// Storage types the optimizer can update. Arithmetic happens in `f64`.
pub trait Scalar: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(x: f64) -> Self {
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments for a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// One moment pair per tensor, with the given element counts.
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_encoder(config: AdamWConfig, params: &EncoderParams) -> Self {
        let sizes: Vec<usize> = params.weights().entries().iter().map(|(_, t)| t.len()).collect();
        Self::new(config, &sizes)
    }

    pub fn num_tensors(&self) -> usize {
        self.m.len()
    }

    /// Updates every encoder tensor in canonical order.
    pub fn step_encoder(&mut self, params: &mut EncoderParams, grads: &Gradients, lr: f64) -> Result<(), MlmError> {
        let g: Vec<&[f64]> = grads.entries().into_iter().map(|(_, t)| t.data.as_slice()).collect();
        let mut w = params.weights_mut().entries_mut();
        let mut p: Vec<&mut [f32]> = w.iter_mut().map(|(_, t)| t.data.as_mut_slice()).collect();
        adamw_step(&mut p, &g, self, lr)
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step<P: Scalar>(
    params: &mut [&mut [P]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), MlmError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(MlmError::ShapeMismatch(format!(
            "{} parameter tensors, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(MlmError::ShapeMismatch(format!(
                "tensor {i}: {} parameters, {} gradients, {} moments",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    if !(lr >= 0.0) {
        return Err(MlmError::InvalidConfig(format!("learning rate {lr} is negative")));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            let theta = p[j].to_f64();
            let theta = theta - lr * c.weight_decay * theta - lr * mhat / (vhat.sqrt() + c.eps);
            p[j] = P::from_f64(theta);
        }
    }
    Ok(())
}
