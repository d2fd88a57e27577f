use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes an 8-bit grayscale or RGB image into a `1×H×W` tensor in `[0, 1]`.
///
/// Colour input is reduced to BT.601 luma. The result is resized with
/// half-pixel-centred bilinear interpolation to `target` = (height, width).
pub fn load_image(path: impl AsRef<Path>, target: (usize, usize)) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let luma: Vec<f32> = if img.color().has_color() {
        img.to_rgb8()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0.map(f32::from);
                (0.299 * r + 0.587 * g + 0.114 * b) / 255.0
            })
            .collect()
    } else {
        img.to_luma8().pixels().map(|p| f32::from(p.0[0]) / 255.0).collect()
    };
    let resized = if (h, w) == target {
        luma
    } else {
        resize_bilinear(&luma, (h, w), target)
    };
    Tensor::new(
        vec![1, target.0, target.1],
        resized.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
}

/// Bilinear resampling with pixel centres at half-integer coordinates.
pub fn resize_bilinear(src: &[f32], (sh, sw): (usize, usize), (dh, dw): (usize, usize)) -> Vec<f32> {
    let axis = |dst: usize, src_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = src_len as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(dh, sh);
    let xs = axis(dw, sw);
    let at = |y: usize, x: usize| f64::from(src[y * sw + x]);
    let mut out = Vec::with_capacity(dh * dw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

/// Quantizes the last two axes of a tensor to an 8-bit grayscale image.
pub fn tensor_to_gray(t: &Tensor) -> Result<GrayImage> {
    let shape = t.shape();
    let (h, w) = match shape {
        [h, w] => (*h, *w),
        [.., h, w] if t.len() == h * w => (*h, *w),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "expected a single-plane image tensor, got {shape:?}"
            )))
        }
    };
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = t.data()[y as usize * w + x as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    }))
}

pub fn save_gray_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    tensor_to_gray(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}
