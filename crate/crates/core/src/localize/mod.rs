//! Defect localization by structural comparison of a board with its
//! reconstruction.
//!
//! The pipeline is `ssim_map → smooth → binarize_diff → find_contours`. The
//! difference score is the summed pixel area of the retained components and
//! a board is defective when the score exceeds the threshold. Thresholds are
//! stated in pixels at 512×512 and scaled by `(H·W) / 512²` at other sizes.

mod contours;
mod ssim;

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

pub use contours::{binarize_diff, find_contours, label_components, Contour, Mask};
pub use ssim::{gaussian_kernel, reflect, smooth, ssim_map, Plane, SsimParams};

use crate::dataset::{ImagePair, Label};
use crate::error::{Error, Result};
use crate::model::Autoencoder;
use crate::tensor::Tensor;

/// Side length at which thresholds are stated.
pub const NATIVE_SIZE: usize = 512;
pub const DEFAULT_THRESHOLD: f64 = 100.0;
pub const DEFAULT_CUTOFF: f64 = 0.3;

/// `(H·W) / 512²`: converts native-resolution pixel thresholds to `H×W`.
pub fn threshold_scale(height: usize, width: usize) -> f64 {
    (height * width) as f64 / (NATIVE_SIZE * NATIVE_SIZE) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizerConfig {
    pub ssim: SsimParams,
    pub smooth_sigma: f64,
    /// Cutoff on normalized dissimilarity `(1 - s) / 2`.
    pub cutoff: f64,
    pub min_area: usize,
    /// Score threshold in pixels at 512×512.
    pub threshold: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            ssim: SsimParams::default(),
            smooth_sigma: 1.0,
            cutoff: DEFAULT_CUTOFF,
            min_area: 4,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.ssim.validate()?;
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            return Err(Error::InvalidConfig(format!("cutoff must lie in (0, 1), got {}", self.cutoff)));
        }
        if !(self.smooth_sigma >= 0.0 && self.smooth_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "smoothing sigma must be >= 0, got {}",
                self.smooth_sigma
            )));
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(Error::InvalidConfig(format!("threshold must be >= 0, got {}", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Intact,
    Defective,
}

impl Verdict {
    pub fn is_defective(self) -> bool {
        self == Verdict::Defective
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffReport {
    pub id: String,
    /// Sum of retained component areas, in pixels at the working resolution.
    pub score: usize,
    /// `score / threshold_scale`: the score expressed in 512×512 pixels.
    pub normalized_score: f64,
    pub verdict: Verdict,
    pub ssim_mean: f64,
    pub threshold: f64,
    pub effective_threshold: f64,
    pub contours: Vec<Contour>,
    #[serde(skip)]
    pub defect_mask: Mask,
}

/// Compares a board with a reconstruction of it (or any stand-in, such as its template).
pub fn compare(input: &Tensor, reconstruction: &Tensor, cfg: &LocalizerConfig) -> Result<DiffReport> {
    cfg.validate()?;
    let a = Plane::from_tensor(input)?;
    let b = Plane::from_tensor(reconstruction)?;
    let s = ssim_map(&a, &b, &cfg.ssim)?;
    let smoothed = smooth(&s, cfg.smooth_sigma)?;
    let mask = binarize_diff(&smoothed, cfg.cutoff);
    let contours = find_contours(&mask, cfg.min_area);
    let score: usize = contours.iter().map(|c| c.area).sum();
    let scale = threshold_scale(a.height, a.width);
    let effective_threshold = cfg.threshold * scale;
    Ok(DiffReport {
        id: String::new(),
        score,
        normalized_score: score as f64 / scale,
        verdict: if score as f64 > effective_threshold {
            Verdict::Defective
        } else {
            Verdict::Intact
        },
        ssim_mean: s.mean(),
        threshold: cfg.threshold,
        effective_threshold,
        contours,
        defect_mask: mask,
    })
}

/// Reconstructs `board` (`[1, H, W]` at the model's input size) and compares.
/// Returns the report and the reconstruction.
pub fn inspect(model: &Autoencoder, board: &Tensor, cfg: &LocalizerConfig) -> Result<(DiffReport, Tensor)> {
    let (h, w) = model.config().input_size;
    if board.shape() != [1, h, w] {
        return Err(Error::ShapeMismatch {
            expected: vec![1, h, w],
            got: board.shape().to_vec(),
        });
    }
    let recon = model.infer(&board.clone().reshape(&[1, 1, h, w])?)?.reshape(&[1, h, w])?;
    Ok((compare(board, &recon, cfg)?, recon))
}

/// A scored evaluation input and whether it is truly defective.
#[derive(Clone, Debug)]
pub struct ScoredBoard {
    pub report: DiffReport,
    pub defective: bool,
}

/// Inspects both images of every pair: the defective image (labelled by the
/// pair's label, defective when unlabelled) and the template (intact).
/// Ids are `<id>/test` and `<id>/temp`; order follows `pairs`.
pub fn score_pairs(model: &Autoencoder, pairs: &[ImagePair], cfg: &LocalizerConfig) -> Result<Vec<ScoredBoard>> {
    let mut out = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        let truth = p.label != Some(Label::Intact);
        for (suffix, image, defective) in [("test", &p.defective, truth), ("temp", &p.template, false)] {
            let (mut report, _) = inspect(model, image, cfg)?;
            report.id = format!("{}/{suffix}", p.id);
            out.push(ScoredBoard { report, defective });
        }
    }
    Ok(out)
}

/// `|a - b|` per pixel, for debugging.
pub fn abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect(),
    )
}

/// The board in grayscale with a red rectangle around each contour.
pub fn overlay(board: &Tensor, contours: &[Contour]) -> Result<RgbImage> {
    let p = Plane::from_tensor(board)?;
    let mut img = RgbImage::from_fn(p.width as u32, p.height as u32, |x, y| {
        let v = (p.at(y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    let red = Rgb([255, 0, 0]);
    for c in contours {
        let (x0, y0) = (c.x as u32, c.y as u32);
        let (x1, y1) = ((c.x + c.w - 1) as u32, (c.y + c.h - 1) as u32);
        for x in x0..=x1 {
            img.put_pixel(x, y0, red);
            img.put_pixel(x, y1, red);
        }
        for y in y0..=y1 {
            img.put_pixel(x0, y, red);
            img.put_pixel(x1, y, red);
        }
    }
    Ok(img)
}

pub fn save_overlay(board: &Tensor, contours: &[Contour], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    overlay(board, contours)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}
