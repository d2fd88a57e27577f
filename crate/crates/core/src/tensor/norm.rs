use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f32,
    pub momentum: f32,
}

impl BatchNormState {
    pub const DEFAULT_EPSILON: f32 = 1e-5;
    pub const DEFAULT_MOMENTUM: f32 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            epsilon: Self::DEFAULT_EPSILON,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

pub struct BatchNormCache {
    mode: Mode,
    xhat: Tensor,
    inv_std: Vec<f64>,
}

pub struct BnGrads {
    pub grad_input: Tensor,
    pub grad_gamma: Tensor,
    pub grad_beta: Tensor,
}

fn channel_slices(n: usize, c: usize, hw: usize) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> {
    (0..n).flat_map(move |b| (0..c).map(move |ch| (ch, (b * c + ch) * hw..(b * c + ch + 1) * hw)))
}

/// Train mode normalizes with batch statistics and folds them into the
/// running estimates; infer mode uses the running estimates only.
pub fn batchnorm_forward(x: &Tensor, state: &mut BatchNormState, mode: Mode) -> Result<(Tensor, BatchNormCache)> {
    let (n, c, h, w) = x.dims4()?;
    if c != state.channels() {
        return Err(Error::ChannelMismatch {
            expected: state.channels(),
            got: c,
        });
    }
    let hw = h * w;
    let count = (n * hw) as f64;
    let eps = f64::from(state.epsilon);

    let (mean, var) = match mode {
        Mode::Train => {
            let mut sum = vec![0.0f64; c];
            for (ch, r) in channel_slices(n, c, hw) {
                sum[ch] += x.data()[r].iter().map(|&v| f64::from(v)).sum::<f64>();
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
            let mut sq = vec![0.0f64; c];
            for (ch, r) in channel_slices(n, c, hw) {
                sq[ch] += x.data()[r]
                    .iter()
                    .map(|&v| {
                        let d = f64::from(v) - mean[ch];
                        d * d
                    })
                    .sum::<f64>();
            }
            let var: Vec<f64> = sq.iter().map(|s| s / count).collect();

            let m = f64::from(state.momentum);
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for ch in 0..c {
                let rm = &mut state.running_mean.data_mut()[ch];
                *rm = ((1.0 - m) * f64::from(*rm) + m * mean[ch]) as f32;
                let rv = &mut state.running_var.data_mut()[ch];
                *rv = ((1.0 - m) * f64::from(*rv) + m * var[ch] * unbias) as f32;
            }
            (mean, var)
        }
        Mode::Infer => (
            state.running_mean.data().iter().map(|&v| f64::from(v)).collect(),
            state.running_var.data().iter().map(|&v| f64::from(v).max(0.0)).collect(),
        ),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0f32; x.len()];
    let mut out = vec![0.0f32; x.len()];
    for (ch, r) in channel_slices(n, c, hw) {
        let g = state.gamma.data()[ch];
        let b = state.beta.data()[ch];
        for i in r {
            let xh = ((f64::from(x.data()[i]) - mean[ch]) * inv_std[ch]) as f32;
            xhat[i] = xh;
            out[i] = g * xh + b;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BatchNormCache {
            mode,
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
        },
    ))
}

pub fn batchnorm_backward(grad_out: &Tensor, cache: &BatchNormCache, state: &BatchNormState) -> Result<BnGrads> {
    grad_out.ensure_shape(cache.xhat.shape())?;
    let (n, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let g = grad_out.data();
    let xhat = cache.xhat.data();

    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for (ch, r) in channel_slices(n, c, hw) {
        for i in r {
            sum_g[ch] += f64::from(g[i]);
            sum_gx[ch] += f64::from(g[i]) * f64::from(xhat[i]);
        }
    }

    let mut dx = vec![0.0f32; grad_out.len()];
    for (ch, r) in channel_slices(n, c, hw) {
        let gamma = f64::from(state.gamma.data()[ch]);
        let scale = gamma * cache.inv_std[ch];
        match cache.mode {
            Mode::Train => {
                let mean_g = sum_g[ch] / count;
                let mean_gx = sum_gx[ch] / count;
                for i in r {
                    let v = f64::from(g[i]) - mean_g - f64::from(xhat[i]) * mean_gx;
                    dx[i] = (scale * v) as f32;
                }
            }
            Mode::Infer => {
                for i in r {
                    dx[i] = (scale * f64::from(g[i])) as f32;
                }
            }
        }
    }

    Ok(BnGrads {
        grad_input: Tensor::new(grad_out.shape().to_vec(), dx)?,
        grad_gamma: Tensor::new(vec![c], sum_gx.iter().map(|&v| v as f32).collect())?,
        grad_beta: Tensor::new(vec![c], sum_g.iter().map(|&v| v as f32).collect())?,
    })
}
