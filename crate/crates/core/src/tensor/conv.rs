//! 2-D cross-correlation (no kernel flip) via im2col and a packed SGEMM.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    /// Square kernel, stride 1, zero padding that preserves spatial size for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (kernel / 2, kernel / 2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("conv channel counts must be positive".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv kernel and stride must be >= 1, got kernel {:?} stride {:?}",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    /// `floor((in + 2 pad - k) / stride) + 1` per axis.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize, s: usize, p: usize| {
            let padded = len + 2 * p;
            if padded < k {
                None
            } else {
                Some((padded - k) / s + 1)
            }
        };
        match (
            axis(h, self.kernel.0, self.stride.0, self.padding.0),
            axis(w, self.kernel.1, self.stride.1, self.padding.1),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::InvalidArgument(format!(
                "conv output would be empty for input {h}x{w} with kernel {:?} and padding {:?}",
                self.kernel, self.padding
            ))),
        }
    }

    fn check(&self, x: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
        self.validate()?;
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                got: c,
            });
        }
        weights.ensure_shape(&self.weight_shape())?;
        let (oh, ow) = self.output_size(h, w)?;
        Ok((n, c, h, w, oh, ow))
    }
}

pub struct ConvGrads {
    pub grad_input: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Range of output columns `ox` whose input column `ox*sw + kj - pw` is in bounds.
    fn valid_ox(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pw {
            0
        } else {
            (self.pw - kj).div_ceil(self.sw)
        };
        // ox*sw + kj - pw <= w - 1
        let limit = self.w + self.pw;
        let hi = if limit <= kj {
            0
        } else {
            ((limit - kj - 1) / self.sw + 1).min(self.ow)
        };
        (lo, hi.max(lo))
    }

    fn im2col(&self, img: &[f32], col: &mut [f32]) {
        let p = self.cols();
        col.fill(0.0);
        for ch in 0..self.c {
            let plane = &img[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_ox(kj);
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ki) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if self.sw == 1 {
                            let start = lo + kj - self.pw;
                            out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                out[ox] = src[ox * self.sw + kj - self.pw];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], img: &mut [f32]) {
        let p = self.cols();
        for ch in 0..self.c {
            let plane = &mut img[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let src_row = &col[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_ox(kj);
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ki) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let src = &src_row[oy * self.ow..(oy + 1) * self.ow];
                        for ox in lo..hi {
                            dst[ox * self.sw + kj - self.pw] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry(spec: &ConvSpec, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Geometry {
    Geometry {
        c,
        h,
        w,
        oh,
        ow,
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        sh: spec.stride.0,
        sw: spec.stride.1,
        ph: spec.padding.0,
        pw: spec.padding.1,
    }
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(x: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (n, c, h, w, oh, ow) = spec.check(x, weights)?;
    bias.ensure_shape(&[spec.out_channels])?;
    let g = geometry(spec, c, h, w, oh, ow);
    let (k, p, co) = (g.rows(), g.cols(), spec.out_channels);

    let mut out = vec![0.0f32; n * co * p];
    let mut col = vec![0.0f32; k * p];
    let in_step = c * h * w;
    for (img, dst) in x.data().chunks(in_step).zip(out.chunks_mut(co * p)) {
        g.im2col(img, &mut col);
        for (o, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias.data()[o]);
        }
        gemm(co, k, p, weights.data(), (k, 1), &col, (p, 1), 1.0, dst);
    }
    Tensor::new(vec![n, co, oh, ow], out)
}

pub fn conv2d_backward(
    grad_out: &Tensor,
    x: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
) -> Result<ConvGrads> {
    let (n, c, h, w, oh, ow) = spec.check(x, weights)?;
    let co = spec.out_channels;
    grad_out.ensure_shape(&[n, co, oh, ow])?;
    let g = geometry(spec, c, h, w, oh, ow);
    let (k, p) = (g.rows(), g.cols());

    let mut grad_x = vec![0.0f32; x.len()];
    let mut grad_w = vec![0.0f32; weights.len()];
    let mut grad_b = vec![0.0f64; co];
    let mut col = vec![0.0f32; k * p];
    let mut grad_col = vec![0.0f32; k * p];
    let in_step = c * h * w;

    for ((img, gimg), gout) in x
        .data()
        .chunks(in_step)
        .zip(grad_x.chunks_mut(in_step))
        .zip(grad_out.data().chunks(co * p))
    {
        g.im2col(img, &mut col);
        // dW += G · colᵀ
        gemm(co, p, k, gout, (p, 1), &col, (1, p), 1.0, &mut grad_w);
        // dcol = Wᵀ · G
        gemm(k, co, p, weights.data(), (1, k), gout, (p, 1), 0.0, &mut grad_col);
        g.col2im(&grad_col, gimg);
        for (o, row) in gout.chunks(p).enumerate() {
            grad_b[o] += row.iter().map(|&v| f64::from(v)).sum::<f64>();
        }
    }

    Ok(ConvGrads {
        grad_input: Tensor::new(x.shape().to_vec(), grad_x)?,
        grad_weight: Tensor::new(weights.shape().to_vec(), grad_w)?,
        grad_bias: Tensor::new(vec![co], grad_b.into_iter().map(|v| v as f32).collect())?,
    })
}
