//! Binarization and 8-connected component extraction.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::ssim::Plane;

/// A binary image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "mask length");
        Self { height, width, data }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// One connected component: tight bounding box and pixel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contour {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub area: usize,
}

impl Contour {
    /// Whether this box overlaps the rectangle `(x, y, w, h)`.
    pub fn intersects(&self, x: usize, y: usize, w: usize, h: usize) -> bool {
        self.x < x + w && x < self.x + self.w && self.y < y + h && y < self.y + self.h
    }

    pub fn contains(&self, x: usize, y: usize, w: usize, h: usize) -> bool {
        self.x <= x && self.y <= y && x + w <= self.x + self.w && y + h <= self.y + self.h
    }
}

/// Marks pixels whose normalized dissimilarity `(1 - s) / 2` exceeds `cutoff`.
pub fn binarize_diff(ssim: &Plane, cutoff: f64) -> Mask {
    Mask::new(
        ssim.height,
        ssim.width,
        ssim.data.iter().map(|&s| (1.0 - s) / 2.0 > cutoff).collect(),
    )
}

/// Labels 8-connected components in raster order of their first pixel.
/// Returns the label image (0 = background, components numbered from 1)
/// and every component, unfiltered.
pub fn label_components(mask: &Mask) -> (Vec<usize>, Vec<Contour>) {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0usize; h * w];
    let mut found = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        let id = found.len() + 1;
        labels[start] = id;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let mut area = 0;
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            area += 1;
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if mask.data[j] && labels[j] == 0 {
                        labels[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        found.push(Contour {
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
            area,
        });
    }
    (labels, found)
}

/// Components with at least `min_area` pixels.
pub fn find_contours(mask: &Mask, min_area: usize) -> Vec<Contour> {
    let (_, all) = label_components(mask);
    all.into_iter().filter(|c| c.area >= min_area).collect()
}
