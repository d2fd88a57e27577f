//! Windowed SSIM and Gaussian smoothing on single-plane images.
//!
//! All arithmetic is f64. Borders are handled by symmetric reflection
//! (`d c b a | a b c d | d c b a`), so outputs have the input's size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::DataLength {
                shape: vec![height, width],
                len: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    /// Accepts `[H, W]`, `[1, H, W]` or `[1, 1, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "expected a single-plane image, got shape {other:?}"
                )))
            }
        };
        Ok(Self {
            height: h,
            width: w,
            data: t.data().iter().map(|&v| f64::from(v)).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, self.height, self.width], |i| self.data[i] as f32)
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    fn zip_map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "SSIM window must be odd and at least 3, got {}",
                self.window
            )));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::InvalidConfig(
                "SSIM sigma, k1, k2 and dynamic range must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Maps any integer coordinate into `0..n` by symmetric reflection.
pub fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable filtering with a symmetric 1-D kernel along both axes.
fn filter(p: &Plane, kernel: &[f64]) -> Plane {
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (p.height, p.width);
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let src = &p.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in kernel.iter().enumerate() {
                acc += t * src[reflect(x as isize + k as isize - r, w)];
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (k, &t) in kernel.iter().enumerate() {
            let sy = reflect(y as isize + k as isize - r, h);
            let src = &rows[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += t * s;
            }
        }
    }
    Plane {
        height: h,
        width: w,
        data: out,
    }
}

/// Per-pixel SSIM with Gaussian-weighted local statistics.
pub fn ssim_map(a: &Plane, b: &Plane, params: &SsimParams) -> Result<Plane> {
    params.validate()?;
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch {
            expected: vec![a.height, a.width],
            got: vec![b.height, b.width],
        });
    }
    let kernel = gaussian_kernel(params.window / 2, params.sigma);
    let mu_a = filter(a, &kernel);
    let mu_b = filter(b, &kernel);
    let aa = filter(&a.zip_map(a, |x, y| x * y), &kernel);
    let bb = filter(&b.zip_map(b, |x, y| x * y), &kernel);
    let ab = filter(&a.zip_map(b, |x, y| x * y), &kernel);
    let (c1, c2) = (params.c1(), params.c2());

    let data = (0..a.data.len())
        .map(|i| {
            let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
            let va = (aa.data[i] - ma * ma).max(0.0);
            let vb = (bb.data[i] - mb * mb).max(0.0);
            let cov = ab.data[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect();
    Ok(Plane {
        height: a.height,
        width: a.width,
        data,
    })
}

/// Gaussian blur with radius `ceil(3 sigma)`. `sigma == 0` is the identity.
pub fn smooth(p: &Plane, sigma: f64) -> Result<Plane> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("smoothing sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(p.clone());
    }
    let radius = (3.0 * sigma).ceil() as usize;
    Ok(filter(p, &gaussian_kernel(radius, sigma)))
}
