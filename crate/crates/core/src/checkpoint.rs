//! Binary checkpoint format.
//!
//! ```text
//! "PCBAE\x01"            6 magic bytes
//! u32 little-endian       header length in bytes
//! header                  UTF-8 JSON: format version, model config, training
//!                         metadata and a tensor directory with payload offsets
//! payload                 concatenated little-endian f32 tensor data
//! ```
//!
//! Offsets in the directory are relative to the first payload byte. Writing is
//! deterministic, so `save(load(save(m)))` reproduces the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Autoencoder, ModelConfig};
use crate::tensor::Tensor;
use crate::train::Phase;

pub const MAGIC: &[u8; 6] = b"PCBAE\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub phase: Option<Phase>,
    pub epoch: usize,
    pub loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    meta: TrainingMeta,
    tensors: Vec<DirEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

/// A model snapshot: architecture, every named tensor, and training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: TrainingMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Autoencoder, meta: TrainingMeta) -> Self {
        Self {
            config: model.config().clone(),
            meta,
            tensors: model
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<Autoencoder> {
        let mut model = Autoencoder::new(self.config.clone())?;
        model.load_tensors(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut dir = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            if !t.all_finite() {
                return Err(Error::Checkpoint(format!("tensor `{name}` contains non-finite values")));
            }
            let nbytes = t.len() * 4;
            dir.push(DirEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: dir,
        })?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Checkpoint("header exceeds 4 GiB".into()))?;

        let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates a checkpoint. Never returns a partially filled model.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes (not a PCBAE v1 checkpoint)".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 4 {
            return Err(Error::Checkpoint("file ends before header length".into()));
        }
        let header_len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        let rest = &rest[4..];
        if rest.len() < header_len {
            return Err(Error::Checkpoint(format!(
                "header declares {header_len} bytes but only {} remain",
                rest.len()
            )));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        header.config.validate()?;
        let payload = &rest[header_len..];

        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for e in header.tensors {
            if tensors.iter().any(|(n, _)| *n == e.name) {
                return Err(Error::Checkpoint(format!("tensor `{}` appears more than once", e.name)));
            }
            let numel: usize = e.shape.iter().product();
            if numel * 4 != e.nbytes || e.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "directory entry for `{}` is inconsistent with its shape {:?}",
                    e.name, e.shape
                )));
            }
            let end = e.offset + e.nbytes;
            if end > payload.len() {
                return Err(Error::TruncatedTensor(e.name));
            }
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset
            )));
        }

        let ckpt = Self {
            config: header.config,
            meta: header.meta,
            tensors,
        };
        // Every tensor the architecture defines must be present with the right shape.
        ckpt.to_model()?;
        let expected = Autoencoder::new(ckpt.config.clone())?.named_tensors().len();
        if ckpt.tensors.len() != expected {
            let model = Autoencoder::new(ckpt.config.clone())?;
            let known: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
            let extra: Vec<String> = ckpt
                .tensors
                .iter()
                .filter(|(n, _)| !known.contains(n))
                .map(|(n, _)| format!("{n} (unexpected)"))
                .collect();
            return Err(Error::TensorMismatch(extra));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint(model: &Autoencoder, meta: TrainingMeta, path: impl AsRef<Path>) -> Result<()> {
    if !model.all_finite() {
        return Err(Error::Checkpoint("refusing to save a model with non-finite weights".into()));
    }
    Checkpoint::from_model(model, meta).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Autoencoder, TrainingMeta)> {
    let ckpt = Checkpoint::load(path)?;
    Ok((ckpt.to_model()?, ckpt.meta))
}

/// Initializes `model` with all weights and statistics of `pretrained`.
pub fn transfer_init(mut model: Autoencoder, pretrained: &Checkpoint) -> Result<Autoencoder> {
    if !model.config().same_architecture(&pretrained.config) {
        return Err(Error::InvalidConfig(format!(
            "pretrained architecture {:?}/{:?}/k{} does not match model {:?}/{:?}/k{}",
            pretrained.config.input_size,
            pretrained.config.channels,
            pretrained.config.kernel,
            model.config().input_size,
            model.config().channels,
            model.config().kernel
        )));
    }
    model.load_tensors(pretrained.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(model)
}
