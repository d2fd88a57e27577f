use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

fn check_shapes(params: &[&mut Tensor], grads: &[Tensor], state: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer got {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(state) {
        g.ensure_shape(p.shape())?;
        s.ensure_shape(p.shape())?;
    }
    Ok(())
}

/// One bias-corrected Adam update; increments the step counter.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    check_shapes(params, grads, &state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - f64::from(cfg.beta1).powi(t);
    let bc2 = 1.0 - f64::from(cfg.beta2).powi(t);
    let (b1, b2) = (f64::from(cfg.beta1), f64::from(cfg.beta2));
    let (lr, eps) = (f64::from(cfg.lr), f64::from(cfg.eps));

    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = f64::from(gi);
            let mn = b1 * f64::from(*mi) + (1.0 - b1) * gi;
            let vn = b2 * f64::from(*vi) + (1.0 - b2) * gi * gi;
            *mi = mn as f32;
            *vi = vn as f32;
            let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + eps);
            *pi = (f64::from(*pi) - update) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 1e-2, momentum: 0.9 }
    }
}

#[derive(Clone, Debug)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        Self {
            velocity: shapes.into_iter().map(Tensor::zeros).collect(),
        }
    }
}

/// Heavy-ball SGD: `v = momentum * v + g; p -= lr * v`.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut SgdState, cfg: &SgdConfig) -> Result<()> {
    check_shapes(params, grads, &state.velocity)?;
    for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
            *vi = cfg.momentum * *vi + gi;
            *pi -= cfg.lr * *vi;
        }
    }
    Ok(())
}
