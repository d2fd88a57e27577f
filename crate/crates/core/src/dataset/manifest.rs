use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::load_image;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Defective,
    Intact,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Defective => "defective",
            Label::Intact => "intact",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "defective" => Ok(Label::Defective),
            "intact" => Ok(Label::Intact),
            other => Err(Error::Manifest(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub defective: PathBuf,
    pub template: PathBuf,
    pub label: Option<Label>,
    pub split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    id: String,
    defective: String,
    template: String,
    label: String,
    split: String,
}

/// Ordered list of (defective, template) image pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads the CSV form. Relative paths resolve against the manifest's directory.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "defective", "template", "label", "split"] {
            return Err(Error::Manifest(format!(
                "{}: expected header `id,defective,template,label,split`",
                path.display()
            )));
        }
        let mut entries = Vec::new();
        for row in reader.deserialize() {
            let row: CsvRow = row?;
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            entries.push(ManifestEntry {
                defective: resolve(&row.defective),
                template: resolve(&row.template),
                label: (!row.label.is_empty()).then(|| row.label.parse()).transpose()?,
                split: (!row.split.is_empty()).then(|| row.split.parse()).transpose()?,
                id: row.id,
            });
        }
        let manifest = Self { entries };
        manifest.check_ids()?;
        Ok(manifest)
    }

    /// Writes the CSV form, storing paths relative to the manifest's directory when possible.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(CsvRow {
                id: e.id.clone(),
                defective: rel(&e.defective),
                template: rel(&e.template),
                label: e.label.map(|l| l.to_string()).unwrap_or_default(),
                split: e.split.map(|s| s.to_string()).unwrap_or_default(),
            })?;
        }
        if self.entries.is_empty() {
            w.write_record(["id", "defective", "template", "label", "split"])?;
        }
        w.flush()?;
        Ok(())
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id `{}`", e.id)));
            }
        }
        Ok(())
    }

    /// Checks that every referenced file exists and that paired images agree in size.
    pub fn validate_files(&self) -> Result<()> {
        for e in &self.entries {
            let dims = |p: &Path| image::image_dimensions(p).map_err(|err| Error::image(p, err));
            let a = dims(&e.defective)?;
            let b = dims(&e.template)?;
            if a != b {
                return Err(Error::Manifest(format!(
                    "pair `{}` has mismatched sizes {a:?} and {b:?}",
                    e.id
                )));
            }
        }
        Ok(())
    }

    pub fn with_split(&self, split: Split) -> Manifest {
        Manifest::new(
            self.entries
                .iter()
                .filter(|e| e.split == Some(split))
                .cloned()
                .collect(),
        )
    }

    pub fn has_split_tags(&self) -> bool {
        self.entries.iter().any(|e| e.split.is_some())
    }

    /// Partition by split tag when tags exist, otherwise by a fresh seeded split.
    pub fn partitions(&self, ratios: (f64, f64, f64), seed: u64) -> Result<(Manifest, Manifest, Manifest)> {
        if self.has_split_tags() {
            Ok((
                self.with_split(Split::Train),
                self.with_split(Split::Val),
                self.with_split(Split::Test),
            ))
        } else {
            split_manifest(self, ratios, seed)
        }
    }

    /// Copy with every entry tagged by a seeded split.
    pub fn tagged(&self, ratios: (f64, f64, f64), seed: u64) -> Result<Manifest> {
        let (train, val, test) = split_manifest(self, ratios, seed)?;
        let tag_of = |id: &str| {
            [(&train, Split::Train), (&val, Split::Val), (&test, Split::Test)]
                .into_iter()
                .find(|(m, _)| m.entries.iter().any(|e| e.id == id))
                .map(|(_, s)| s)
        };
        Ok(Manifest::new(
            self.entries
                .iter()
                .map(|e| ManifestEntry {
                    split: tag_of(&e.id),
                    ..e.clone()
                })
                .collect(),
        ))
    }
}

/// Seeded partition into (train, val, test); each part keeps manifest order.
pub fn split_manifest(manifest: &Manifest, ratios: (f64, f64, f64), seed: u64) -> Result<(Manifest, Manifest, Manifest)> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset("cannot split an empty manifest".into()));
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !r.is_finite() || *r < 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    let n = manifest.len();
    let n_train = ((n as f64) * a).round() as usize;
    let n_val = (((n as f64) * b).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed));
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Manifest::new(idx.into_iter().map(|i| manifest.entries[i].clone()).collect())
    };
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

/// Builds a manifest from a DeepPCB-style tree of `<id>_test.*` / `<id>_temp.*` files.
pub fn scan_deeppcb(root: impl AsRef<Path>) -> Result<Manifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Manifest(format!("{} is not a directory", root.display())));
    }
    let mut entries = Vec::new();
    for item in walkdir::WalkDir::new(root).sort_by_file_name() {
        let item = item.map_err(|e| Error::Manifest(e.to_string()))?;
        let path = item.path();
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        let Some(id) = stem.strip_suffix("_test") else {
            continue;
        };
        let template = path.with_file_name(format!("{id}_temp.{ext}"));
        if template.is_file() {
            entries.push(ManifestEntry {
                id: id.to_string(),
                defective: path.to_path_buf(),
                template,
                label: Some(Label::Defective),
                split: None,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no `*_test` / `*_temp` image pairs under {}",
            root.display()
        )));
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = Manifest::new(entries);
    manifest.check_ids()?;
    Ok(manifest)
}

/// A decoded (defective, template) pair, each `1×H×W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub defective: Tensor,
    pub template: Tensor,
    pub label: Option<Label>,
}

pub fn load_pairs(manifest: &Manifest, size: (usize, usize)) -> Result<Vec<ImagePair>> {
    manifest.validate_files()?;
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(ImagePair {
                id: e.id.clone(),
                defective: load_image(&e.defective, size)?,
                template: load_image(&e.template, size)?,
                label: e.label,
            })
        })
        .collect()
}
