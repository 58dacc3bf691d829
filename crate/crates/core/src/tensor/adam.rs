//! Bias-corrected Adam with a cosine-annealed learning rate.

use super::Tensor;
use crate::error::{Error, Result};

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub base_lr: f32,
}

impl AdamState {
    pub fn new(numel: usize, base_lr: f32) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
        }
    }
}

/// One bias-corrected Adam update over a parameter list.
///
/// Gradients must be populated; they are consumed (zeroed) by the update.
pub fn adam_step(params: &[Tensor], states: &mut [AdamState], lr_now: f32) -> Result<()> {
    if params.len() != states.len() {
        return Err(Error::State(format!(
            "{} params vs {} optimizer states",
            params.len(),
            states.len()
        )));
    }
    if lr_now <= 0.0 {
        return Err(Error::State(format!("learning rate must be > 0, got {lr_now}")));
    }
    for (p, st) in params.iter().zip(states.iter_mut()) {
        let grad = p
            .grad()
            .ok_or_else(|| Error::State(format!("missing gradient for param {:?}", p.shape())))?;
        if grad.len() != st.m.len() {
            return Err(Error::State(format!(
                "gradient length {} does not match state length {}",
                grad.len(),
                st.m.len()
            )));
        }
        st.step += 1;
        let bc1 = 1.0 - st.beta1.powi(st.step as i32);
        let bc2 = 1.0 - st.beta2.powi(st.step as i32);
        let mut data = p.to_vec();
        for i in 0..grad.len() {
            let g = grad[i];
            st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
            st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            data[i] -= lr_now * m_hat / (v_hat.sqrt() + st.eps);
        }
        p.set_data(&data);
        p.zero_grad();
    }
    Ok(())
}

/// Cosine schedule from `base_lr` down to `floor_lr` over `total_steps`.
pub fn cosine_lr(base_lr: f32, floor_lr: f32, step: usize, total_steps: usize) -> f32 {
    if total_steps <= 1 {
        return base_lr;
    }
    let progress = (step.min(total_steps - 1)) as f32 / (total_steps - 1) as f32;
    floor_lr + 0.5 * (base_lr - floor_lr) * (1.0 + (std::f32::consts::PI * progress).cos())
}

/// Optimizer bundle: one [`AdamState`] per parameter, stepped together.
pub struct Adam {
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &[Tensor], base_lr: f32) -> Self {
        Adam {
            states: params
                .iter()
                .map(|p| AdamState::new(p.numel(), base_lr))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &[Tensor], lr_now: f32) -> Result<()> {
        adam_step(params, &mut self.states, lr_now)
    }
}
