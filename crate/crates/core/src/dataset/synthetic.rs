//! Synthetic circuit-like boards with known defects.
//!
//! Templates are binary images of Manhattan traces (3 px wide, on an 8 px
//! routing grid) ending in square pads. Defective copies add rectangles of
//! copper that touch existing copper (spurs and shorts) or remove rectangles
//! from copper at its edge (opens and mouse bites). Each defect rectangle
//! lies entirely on uniform template pixels, so the ground-truth mask marks
//! exactly the pixels where defective and template differ.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{save_gray_png, Label, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const PITCH: usize = 8;
const TRACE_HALF: usize = 1;
const PAD_HALF: usize = 3;
const MAX_PLACEMENT_TRIES: usize = 4000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    /// Extra copper attached to a trace or pad.
    Extra,
    /// Copper removed from the edge of a trace or pad.
    Missing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticDefect {
    pub kind: DefectKind,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl SyntheticDefect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// How many defects each board receives and how large they are.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DefectSpec {
    pub count: (usize, usize),
    /// Inclusive range of rectangle side lengths in pixels.
    pub side: (usize, usize),
}

impl Default for DefectSpec {
    fn default() -> Self {
        Self {
            count: (1, 3),
            side: (3, 10),
        }
    }
}

impl DefectSpec {
    pub fn none() -> Self {
        Self {
            count: (0, 0),
            side: (3, 3),
        }
    }

    /// One square defect with the given side.
    pub fn square(side: usize) -> Self {
        Self {
            count: (1, 1),
            side: (side, side),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count.0 > self.count.1 || self.side.0 > self.side.1 || self.side.0 == 0 {
            return Err(Error::InvalidArgument(format!("invalid defect spec {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for DefectSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.count.1 == 0 {
            return f.write_str("none");
        }
        write!(
            f,
            "random:{}-{}:{}-{}",
            self.count.0, self.count.1, self.side.0, self.side.1
        )
    }
}

/// Accepts `none`, `default`, `square:<side>` and `random:<min>-<max>:<min side>-<max side>`.
impl FromStr for DefectSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse defect spec `{s}`"));
        let range = |r: &str| -> Result<(usize, usize)> {
            let (a, b) = r.split_once('-').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        };
        let spec = match s.split(':').collect::<Vec<_>>()[..] {
            ["none"] => Self::none(),
            ["default"] | ["random"] => Self::default(),
            ["square", side] => Self::square(side.parse().map_err(|_| bad())?),
            ["random", count, side] => Self {
                count: range(count)?,
                side: range(side)?,
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticBoard {
    pub template: Tensor,
    pub defective: Tensor,
    /// 1 where `defective` differs from `template`, else 0.
    pub mask: Tensor,
    pub defects: Vec<SyntheticDefect>,
}

struct Canvas {
    size: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn fill_rect(&mut self, x0: isize, y0: isize, x1: isize, y1: isize) {
        let clamp = |v: isize| v.clamp(0, self.size as isize - 1) as usize;
        for y in clamp(y0)..=clamp(y1) {
            for x in clamp(x0)..=clamp(x1) {
                self.px[y * self.size + x] = 1;
            }
        }
    }

    fn node(g: usize) -> isize {
        (g * PITCH + PITCH / 2) as isize
    }

    fn trace(&mut self, (ax, ay): (usize, usize), (bx, by): (usize, usize)) {
        let (x0, x1) = (Self::node(ax.min(bx)), Self::node(ax.max(bx)));
        let (y0, y1) = (Self::node(ay.min(by)), Self::node(ay.max(by)));
        let t = TRACE_HALF as isize;
        self.fill_rect(x0 - t, y0 - t, x1 + t, y1 + t);
    }

    fn pad(&mut self, (gx, gy): (usize, usize)) {
        let (cx, cy) = (Self::node(gx), Self::node(gy));
        let p = PAD_HALF as isize;
        self.fill_rect(cx - p, cy - p, cx + p, cy + p);
    }
}

fn draw_template(size: usize, rng: &mut rng::Rng) -> Vec<u8> {
    let nodes = size / PITCH;
    let mut canvas = Canvas {
        size,
        px: vec![0; size * size],
    };
    let traces = (size / 16).max(2) + rng.gen_range(0..=size / 32);
    for _ in 0..traces {
        let mut at = (rng.gen_range(0..nodes), rng.gen_range(0..nodes));
        canvas.pad(at);
        let segments = rng.gen_range(1..=3);
        let mut horizontal = rng.gen_bool(0.5);
        for _ in 0..segments {
            let reach = rng.gen_range(2..=(nodes / 2).max(2));
            let mut step = |v: usize| {
                if rng.gen_bool(0.5) {
                    v.saturating_sub(reach)
                } else {
                    (v + reach).min(nodes - 1)
                }
            };
            let next = if horizontal { (step(at.0), at.1) } else { (at.0, step(at.1)) };
            canvas.trace(at, next);
            at = next;
            horizontal = !horizontal;
        }
        if rng.gen_bool(0.8) {
            canvas.pad(at);
        }
    }
    canvas.px
}

fn try_place(
    px: &[u8],
    reserved: &[bool],
    size: usize,
    kind: DefectKind,
    (w, h): (usize, usize),
    rng: &mut rng::Rng,
) -> Option<SyntheticDefect> {
    if w + 2 > size || h + 2 > size {
        return None;
    }
    let x = rng.gen_range(1..size - w);
    let y = rng.gen_range(1..size - h);
    let inside = match kind {
        DefectKind::Extra => 0,
        DefectKind::Missing => 1,
    };
    // Rectangle must be uniform and untouched by earlier defects (with a 2 px gap).
    for yy in y - 1..=y + h {
        for xx in x - 1..=x + w {
            let on_rect = yy >= y && yy < y + h && xx >= x && xx < x + w;
            if on_rect && px[yy * size + xx] != inside {
                return None;
            }
        }
    }
    for yy in y.saturating_sub(2)..(y + h + 2).min(size) {
        for xx in x.saturating_sub(2)..(x + w + 2).min(size) {
            if reserved[yy * size + xx] {
                return None;
            }
        }
    }
    // The one-pixel ring must touch the other material, i.e. the defect sits on an edge.
    let mut touches = false;
    for yy in y - 1..=y + h {
        for xx in x - 1..=x + w {
            let on_ring = yy == y - 1 || yy == y + h || xx == x - 1 || xx == x + w;
            if on_ring && px[yy * size + xx] != inside {
                touches = true;
            }
        }
    }
    touches.then_some(SyntheticDefect { kind, x, y, w, h })
}

/// Generates one template/defective pair. Deterministic in `seed`.
pub fn synthesize_board(size: usize, spec: &DefectSpec, seed: u64) -> Result<SyntheticBoard> {
    if size < 16 || size % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic board size must be a multiple of 8 and at least 16, got {size}"
        )));
    }
    spec.validate()?;
    let mut rng = rng::rng(seed);
    let template = draw_template(size, &mut rng);
    let mut defective = template.clone();
    let mut reserved = vec![false; size * size];
    let mut defects = Vec::new();

    let count = rng.gen_range(spec.count.0..=spec.count.1);
    for _ in 0..count {
        let mut kind = if rng.gen_bool(0.5) {
            DefectKind::Extra
        } else {
            DefectKind::Missing
        };
        let dims = (
            rng.gen_range(spec.side.0..=spec.side.1),
            rng.gen_range(spec.side.0..=spec.side.1),
        );
        let mut placed = None;
        for attempt in 0..MAX_PLACEMENT_TRIES {
            // Large missing-copper rectangles rarely fit; fall back to extra copper.
            if attempt == MAX_PLACEMENT_TRIES / 2 {
                kind = DefectKind::Extra;
            }
            if let Some(d) = try_place(&template, &reserved, size, kind, dims, &mut rng) {
                placed = Some(d);
                break;
            }
        }
        let Some(d) = placed else { continue };
        let value = match d.kind {
            DefectKind::Extra => 1,
            DefectKind::Missing => 0,
        };
        for yy in d.y..d.y + d.h {
            for xx in d.x..d.x + d.w {
                defective[yy * size + xx] = value;
                reserved[yy * size + xx] = true;
            }
        }
        defects.push(d);
    }

    let to_tensor = |v: &[u8]| Tensor::new(vec![1, size, size], v.iter().map(|&b| f32::from(b)).collect());
    let mask: Vec<u8> = template
        .iter()
        .zip(&defective)
        .map(|(a, b)| u8::from(a != b))
        .collect();
    Ok(SyntheticBoard {
        template: to_tensor(&template)?,
        defective: to_tensor(&defective)?,
        mask: to_tensor(&mask)?,
        defects,
    })
}

/// Ground-truth mask path for a synthetic defective image (`<id>_test.png` → `<id>_mask.png`).
pub fn mask_path_for(defective: &Path) -> Option<PathBuf> {
    let name = defective.file_name()?.to_str()?;
    let stem = name.strip_suffix("_test.png")?;
    Some(defective.with_file_name(format!("{stem}_mask.png")))
}

/// Writes `n` synthetic pairs plus ground-truth masks as PNGs under `out_dir`.
pub fn make_synthetic_dataset(
    n: usize,
    size: usize,
    spec: &DefectSpec,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("syn{i:05}");
        let board = synthesize_board(size, spec, rng::derive(seed, &[i as u64]))?;
        let defective = out_dir.join(format!("{id}_test.png"));
        let template = out_dir.join(format!("{id}_temp.png"));
        save_gray_png(&board.defective, &defective)?;
        save_gray_png(&board.template, &template)?;
        save_gray_png(&board.mask, out_dir.join(format!("{id}_mask.png")))?;
        entries.push(ManifestEntry {
            id,
            defective,
            template,
            label: Some(if board.defects.is_empty() {
                Label::Intact
            } else {
                Label::Defective
            }),
            split: None,
        });
    }
    Ok(Manifest::new(entries))
}
