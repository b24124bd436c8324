//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamWState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamWState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        Self { m, v, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One AdamW update of every parameter in place:
/// `p ← p − lr·m̂/(√v̂ + eps) − lr·weight_decay·p`.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adamw: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "adamw: param {i} shape {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} has non-finite entry at {j}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps) + lr * cfg.weight_decay * *w;
        }
    }
    Ok(())
}

/// `lr0 · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("cosine_lr needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::contract(format!("step {step} beyond total {total_steps}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
