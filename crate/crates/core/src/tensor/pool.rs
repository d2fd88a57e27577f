use super::Tensor;
use crate::error::{Error, Result};

/// Flat input offsets of each pooled maximum, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Max pooling over `window`×`window` blocks moved by `stride`.
///
/// Ties resolve to the first maximum in row-major window order.
pub fn maxpool2d(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolIndices)> {
    let (n, c, h, w) = x.dims4()?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool window and stride must be >= 1".into()));
    }
    if h % stride != 0 || w % stride != 0 || window > h || window > w {
        return Err(Error::InvalidArgument(format!(
            "spatial size {h}x{w} is not divisible by pool stride {stride}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = src[best_idx];
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for (dx, &v) in src[row..row + window].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, oh, ow], out)?,
        PoolIndices {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes each upstream gradient to the input position that won the max.
pub fn maxpool2d_backward(grad_out: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![indices.argmax.len()],
            got: grad_out.shape().to_vec(),
        });
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    let dst = grad.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(&indices.argmax) {
        dst[i] += g;
    }
    Ok(grad)
}

/// Nearest-neighbour upsampling: each pixel becomes a `factor`×`factor` block.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..oh {
            let srow = &src[(y / factor) * w..(y / factor + 1) * w];
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / factor];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Sums the gradient over every replication block.
pub fn upsample_nearest_backward(grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, oh, ow) = grad_out.dims4()?;
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "gradient {oh}x{ow} is not a multiple of upsample factor {factor}"
        )));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![0.0f32; n * c * h * w];
    for (src, dst) in grad_out.data().chunks(oh * ow).zip(out.chunks_mut(h * w)) {
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / factor) * w + x / factor] += src[y * ow + x];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}
