use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_NOISE_DENSITY: f64 = 0.05;

/// Salt-and-pepper corruption.
///
/// Exactly `round(density * numel)` distinct pixels are chosen uniformly and
/// set to 0 or 1 with equal probability; every other pixel is untouched.
pub fn add_salt_pepper(img: &Tensor, density: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::InvalidArgument(format!(
            "noise density must lie in [0, 1], got {density}"
        )));
    }
    let n = img.len();
    let k = (density * n as f64).round() as usize;
    let mut rng = rng::rng(seed);
    let mut out = img.clone();
    let data = out.data_mut();
    for i in index::sample(&mut rng, n, k.min(n)) {
        data[i] = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    }
    Ok(out)
}
