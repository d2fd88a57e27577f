//! Two-phase training.
//!
//! Phase A fits a plain autoencoder to intact templates (input = target).
//! Phase B starts from the phase-A weights and learns to map salt-and-pepper
//! corrupted defective boards onto their intact templates. Noise positions
//! are re-drawn every epoch from a seed derived from `(seed, epoch, id)`;
//! validation inputs use a fixed per-id noise draw so losses are comparable
//! across epochs and reproducible after reloading a checkpoint.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{transfer_init, Checkpoint, TrainingMeta};
use crate::dataset::{add_salt_pepper, load_pairs, ImagePair, Manifest, DEFAULT_NOISE_DENSITY};
use crate::error::{Error, Result};
use crate::model::{Autoencoder, ModelConfig};
use crate::rng;
use crate::tensor::{
    adam_step, bce_loss, sgd_step, sigmoid_bce_grad, AdamConfig, AdamState, SgdConfig, SgdState, Tensor,
};

const TAG_SHUFFLE: u64 = 1;
const TAG_TRAIN_NOISE: u64 = 2;
const TAG_VAL_NOISE: u64 = 3;

/// Split used when the manifest carries no split tags.
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Plain autoencoder on intact boards.
    A,
    /// Denoising fine-tune on (noisy defective → intact) pairs.
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    pub optimizer: OptimizerKind,
    /// Only used by SGD.
    pub momentum: f32,
    pub noise_density: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn phase_a() -> Self {
        Self {
            phase: Phase::A,
            batch_size: 2,
            epochs: 4,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            noise_density: DEFAULT_NOISE_DENSITY,
            seed: 0,
            early_stop_patience: 5,
            checkpoint_dir: None,
        }
    }

    pub fn phase_b() -> Self {
        Self {
            phase: Phase::B,
            epochs: 17,
            ..Self::phase_a()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.noise_density) {
            return Err(Error::InvalidConfig(format!(
                "noise density must lie in [0, 1], got {}",
                self.noise_density
            )));
        }
        Ok(())
    }
}

/// What the network is asked to do with each pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Task {
    /// template → template
    Reconstruct,
    /// salt-and-pepper(defective) → template
    Denoise { density: f64 },
}

impl Task {
    fn for_config(cfg: &TrainConfig) -> Self {
        match cfg.phase {
            Phase::A => Task::Reconstruct,
            Phase::B => Task::Denoise {
                density: cfg.noise_density,
            },
        }
    }

    fn input(&self, pair: &ImagePair, noise_seed: u64) -> Result<Tensor> {
        match *self {
            Task::Reconstruct => Ok(pair.template.clone()),
            Task::Denoise { density } => add_salt_pepper(&pair.defective, density, noise_seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub phase: Phase,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub steps_per_epoch: usize,
    pub total_steps: u64,
    pub stopped_early: bool,
}

impl TrainLog {
    /// `epoch,train_loss,val_loss,seconds`. With `timing` off the seconds
    /// column is left empty so that reruns produce identical bytes.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for r in &self.records {
            let secs = if timing { format!("{:.3}", r.seconds) } else { String::new() };
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, secs);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, timing: bool) -> Result<()> {
        fs::write(path, self.to_csv(timing))?;
        Ok(())
    }

    pub fn final_val_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.val_loss)
    }

    /// Line plot of training and validation loss per epoch.
    pub fn to_svg(&self) -> String {
        loss_curve_svg(self)
    }
}

/// In-memory train and validation pairs.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
}

impl TrainData {
    /// Loads the train and val partitions (split tags, or `DEFAULT_SPLIT` with `seed`).
    pub fn from_manifest(manifest: &Manifest, size: (usize, usize), seed: u64) -> Result<Self> {
        let (train, val, _) = manifest.partitions(DEFAULT_SPLIT, seed)?;
        Ok(Self {
            train: load_pairs(&train, size)?,
            val: load_pairs(&val, size)?,
        })
    }
}

enum Optimizer {
    Adam(AdamState, AdamConfig),
    Sgd(SgdState, SgdConfig),
}

impl Optimizer {
    fn new(cfg: &TrainConfig, shapes: &[Vec<usize>]) -> Self {
        let shapes = shapes.iter().map(Vec::as_slice);
        match cfg.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(
                AdamState::new(shapes),
                AdamConfig {
                    lr: cfg.lr,
                    ..AdamConfig::default()
                },
            ),
            OptimizerKind::Sgd => Optimizer::Sgd(
                SgdState::new(shapes),
                SgdConfig {
                    lr: cfg.lr,
                    momentum: cfg.momentum,
                },
            ),
        }
    }

    fn step(&mut self, model: &mut Autoencoder, grads: &[Tensor]) -> Result<()> {
        let mut params = model.trainable_mut();
        match self {
            Optimizer::Adam(st, c) => adam_step(&mut params, grads, st, c),
            Optimizer::Sgd(st, c) => sgd_step(&mut params, grads, st, c),
        }
    }
}

/// Mean BCE over `pairs` in inference mode. Each image weighs equally.
pub fn evaluate_loss(model: &Autoencoder, pairs: &[ImagePair], task: Task, seed: u64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("cannot evaluate loss on an empty split".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        let input = task.input(p, rng::item_seed(seed, &p.id, &[TAG_VAL_NOISE]))?;
        let shape = input.shape().to_vec();
        let x = input.reshape(&[1, shape[0], shape[1], shape[2]])?;
        let y = model.infer(&x)?;
        let target = p.template.clone().reshape(y.shape())?;
        total += bce_loss(&y, &target)?;
    }
    Ok(total / pairs.len() as f64)
}

fn batch_tensors(batch: &[&ImagePair], task: Task, seed: u64, epoch: usize) -> Result<(Tensor, Tensor)> {
    let inputs = batch
        .iter()
        .map(|p| task.input(p, rng::item_seed(seed, &p.id, &[TAG_TRAIN_NOISE, epoch as u64])))
        .collect::<Result<Vec<_>>>()?;
    let x = Tensor::stack(&inputs.iter().collect::<Vec<_>>())?;
    let t = Tensor::stack(&batch.iter().map(|p| &p.template).collect::<Vec<_>>())?;
    Ok((x, t))
}

fn checkpoint_path(cfg: &TrainConfig) -> Option<PathBuf> {
    let name = match cfg.phase {
        Phase::A => "phase_a_best.pcbae",
        Phase::B => "phase_b_best.pcbae",
    };
    cfg.checkpoint_dir.as_ref().map(|d| d.join(name))
}

/// The shared epoch loop. Returns the best-validation checkpoint.
fn fit(mut model: Autoencoder, data: &TrainData, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    // Single-sample runs have no held-out split; validate on the training set.
    let val = if data.val.is_empty() { &data.train } else { &data.val };
    let task = Task::for_config(cfg);
    let ckpt_path = checkpoint_path(cfg);
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }

    let mut optimizer = Optimizer::new(cfg, &model.trainable_shapes());
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut total_steps = 0u64;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng::rng(rng::derive(cfg.seed, &[TAG_SHUFFLE, epoch as u64])));

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ImagePair> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (x, target) = batch_tensors(&batch, task, cfg.seed, epoch)?;
            let (y, tape) = model.forward_train(&x)?;
            loss_sum += bce_loss(&y, &target)? * batch.len() as f64;
            let grads = model.backward(&tape, &sigmoid_bce_grad(&y, &target)?)?;
            optimizer.step(&mut model, &grads)?;
            total_steps += 1;
        }
        if !model.all_finite() {
            return Err(Error::InvalidConfig(format!(
                "training diverged at epoch {epoch}; lower the learning rate"
            )));
        }

        let train_loss = loss_sum / data.train.len() as f64;
        let val_loss = evaluate_loss(&model, val, task, cfg.seed)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "phase {:?} epoch {epoch}: train {train_loss:.5} val {val_loss:.5} ({:.1}s)",
            cfg.phase,
            record.seconds
        );
        records.push(record);

        let improved = best.as_ref().is_none_or(|(_, b, _)| val_loss < *b);
        if improved {
            let meta = TrainingMeta {
                phase: Some(cfg.phase),
                epoch,
                loss: Some(val_loss),
            };
            let ckpt = Checkpoint::from_model(&model, meta);
            if let Some(path) = &ckpt_path {
                ckpt.save(path)?;
            }
            best = Some((epoch, val_loss, ckpt));
        } else if let Some((best_epoch, _, _)) = &best {
            if epoch - best_epoch >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_loss, ckpt) = best.expect("at least one epoch runs");
    Ok((
        ckpt,
        TrainLog {
            phase: cfg.phase,
            steps_per_epoch: data.train.len().div_ceil(cfg.batch_size),
            records,
            best_epoch,
            best_val_loss,
            best_checkpoint: ckpt_path,
            total_steps,
            stopped_early,
        },
    ))
}

/// Phase A on already loaded data: a fresh model learns to reproduce intact templates.
pub fn train_phase_a_on(data: &TrainData, model_config: &ModelConfig, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    let cfg = TrainConfig {
        phase: Phase::A,
        ..cfg.clone()
    };
    fit(Autoencoder::new(model_config.clone())?, data, &cfg)
}

pub fn train_phase_a(manifest: &Manifest, model_config: &ModelConfig, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    model_config.validate()?;
    let data = TrainData::from_manifest(manifest, model_config.input_size, cfg.seed)?;
    train_phase_a_on(&data, model_config, cfg)
}

/// How the phase-B network is initialized.
#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    /// Transfer every weight from a phase-A checkpoint.
    Pretrained(&'a Checkpoint),
    /// Fresh He-uniform weights (the no-transfer baseline).
    Cold(&'a ModelConfig),
}

pub fn train_phase_b_on(data: &TrainData, init: Init<'_>, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    let cfg = TrainConfig {
        phase: Phase::B,
        ..cfg.clone()
    };
    let model = match init {
        Init::Pretrained(ckpt) => transfer_init(Autoencoder::new(ckpt.config.clone())?, ckpt)?,
        Init::Cold(config) => Autoencoder::new(config.clone())?,
    };
    fit(model, data, &cfg)
}

pub fn train_phase_b(manifest: &Manifest, pretrained: &Checkpoint, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    let data = TrainData::from_manifest(manifest, pretrained.config.input_size, cfg.seed)?;
    train_phase_b_on(&data, Init::Pretrained(pretrained), cfg)
}

pub fn loss_curve_svg(log: &TrainLog) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let n = log.records.len().max(1);
    let losses = log.records.iter().flat_map(|r| [r.train_loss, r.val_loss]);
    let (lo, hi) = losses.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, lo.max(0.0) + 1.0) };
    let x_of = |epoch: usize| M + (W - 2.0 * M) * if n == 1 { 0.5 } else { (epoch - 1) as f64 / (n - 1) as f64 };
    let y_of = |v: f64| H - M - (H - 2.0 * M) * (v - lo) / (hi - lo);
    let series = |f: fn(&EpochRecord) -> f64| {
        log.records
            .iter()
            .map(|r| format!("{:.2},{:.2}", x_of(r.epoch), y_of(f(r))))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">Phase {:?} loss</text>"#,
        W / 2.0,
        log.phase
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{M},{M} V{} H{}" fill="none" stroke="black"/>"#,
        H - M,
        W - M
    );
    for (v, y) in [(hi, M), (lo, H - M)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.4}</text>"#,
            M - 4.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">epoch (1..{})</text>"#,
        W / 2.0,
        H - 15.0,
        log.records.len()
    );
    for (label, color, f, dy) in [
        ("train", "#1f77b4", (|r: &EpochRecord| r.train_loss) as fn(&EpochRecord) -> f64, 0.0),
        ("validation", "#d62728", (|r: &EpochRecord| r.val_loss) as fn(&EpochRecord) -> f64, 16.0),
    ] {
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            series(f)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}" font-family="sans-serif" font-size="12">{label}</text>"#,
            W - M - 80.0,
            M + dy
        );
    }
    svg.push_str("</svg>\n");
    svg
}
