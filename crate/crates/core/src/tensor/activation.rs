use super::Tensor;
use crate::error::Result;

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

// Largest f32 strictly below 1.
const SIGMOID_MAX: f32 = 1.0 - f32::EPSILON / 2.0;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of `relu` given the forward input.
pub fn relu_backward(grad_out: &Tensor, x: &Tensor) -> Result<Tensor> {
    grad_out.ensure_shape(x.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Logistic sigmoid. Saturated values are kept strictly inside (0, 1).
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| {
        let s = if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        };
        s.clamp(f32::MIN_POSITIVE, SIGMOID_MAX)
    })
}

/// Gradient of `sigmoid` given its forward output.
pub fn sigmoid_backward(grad_out: &Tensor, out: &Tensor) -> Result<Tensor> {
    grad_out.ensure_shape(out.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(out.data())
        .map(|(&g, &s)| g * s * (1.0 - s))
        .collect();
    Tensor::new(out.shape().to_vec(), data)
}

fn clamp_pred(p: f32) -> f64 {
    f64::from(p).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// Mean binary cross-entropy, `-(1/N) Σ [y ln p + (1-y) ln(1-p)]`.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.ensure_shape(target.shape())?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = clamp_pred(p);
            let y = f64::from(y);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of `bce_loss` with respect to `pred`. Zero where the clamp is active.
pub fn bce_loss_backward(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    pred.ensure_shape(target.shape())?;
    let n = pred.len() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let pd = f64::from(p);
            if pd < BCE_CLAMP || pd > 1.0 - BCE_CLAMP {
                return 0.0;
            }
            let y = f64::from(y);
            ((pd - y) / (pd * (1.0 - pd)) / n) as f32
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data)
}

/// Gradient of `bce_loss(sigmoid(z), target)` with respect to the logits `z`,
/// given the sigmoid output. Equals `(p - y) / N`.
pub fn sigmoid_bce_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    pred.ensure_shape(target.shape())?;
    let n = pred.len() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| ((f64::from(p) - f64::from(y)) / n) as f32)
        .collect();
    Tensor::new(pred.shape().to_vec(), data)
}
