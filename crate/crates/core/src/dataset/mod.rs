//! Board images: decoding, noise injection, manifests and synthetic boards.

mod image_io;
mod manifest;
mod noise;
mod synthetic;

pub use image_io::{load_image, resize_bilinear, save_gray_png, tensor_to_gray};
pub use manifest::{load_pairs, scan_deeppcb, split_manifest, ImagePair, Label, Manifest, ManifestEntry, Split};
pub use noise::{add_salt_pepper, DEFAULT_NOISE_DENSITY};
pub use synthetic::{make_synthetic_dataset, mask_path_for, synthesize_board, DefectKind, DefectSpec, SyntheticBoard, SyntheticDefect};

/// Working resolution for desk-scale runs.
pub const DESK_SIZE: usize = 128;
