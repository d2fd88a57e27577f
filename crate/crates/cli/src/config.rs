//! Run configuration: built-in defaults, an optional TOML file, and flags.
//!
//! Precedence is flags > file > defaults. Every key is unique across
//! sections and corresponds to the flag `--<key with hyphens>`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use pcbae::localize::{LocalizerConfig, SsimParams};
use pcbae::model::ModelConfig;
use pcbae::train::{OptimizerKind, Phase, TrainConfig};

/// `(section, key)` for every configurable value; `""` is the top level.
#[cfg(test)]
pub const KEYS: &[(&str, &str)] = &[
    ("", "seed"),
    ("", "out_dir"),
    ("model", "image_size"),
    ("model", "channels"),
    ("model", "kernel"),
    ("train", "batch_size"),
    ("train", "pretrain_epochs"),
    ("train", "epochs"),
    ("train", "lr"),
    ("train", "optimizer"),
    ("train", "momentum"),
    ("train", "early_stop_patience"),
    ("train", "record_timing"),
    ("noise", "noise_density"),
    ("localizer", "threshold"),
    ("localizer", "cutoff"),
    ("localizer", "smooth_sigma"),
    ("localizer", "min_area"),
    ("localizer", "ssim_window"),
    ("localizer", "ssim_sigma"),
    ("localizer", "ssim_k1"),
    ("localizer", "ssim_k2"),
    ("eval", "thresholds"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        }
    }
}

impl fmt::Display for OptimizerArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerArg::Adam => "adam",
            OptimizerArg::Sgd => "sgd",
        })
    }
}

/// Flags shared by every subcommand. All optional so that unset flags fall
/// through to the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct GlobalFlags {
    /// TOML config file with [model], [train], [noise], [localizer] and [eval] sections
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Master random seed [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for every output artifact [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,

    /// Square working resolution in pixels [default: 512]
    #[arg(long, global = true, value_name = "PX")]
    pub image_size: Option<usize>,
    /// Encoder channel widths, comma separated [default: 16,32,64]
    #[arg(long, global = true, value_delimiter = ',', value_name = "LIST")]
    pub channels: Option<Vec<usize>>,
    /// Convolution kernel size (odd) [default: 3]
    #[arg(long, global = true)]
    pub kernel: Option<usize>,

    /// Mini-batch size [default: 2]
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Epochs for `pretrain` [default: 4]
    #[arg(long, global = true)]
    pub pretrain_epochs: Option<usize>,
    /// Epochs for `train` [default: 17]
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Learning rate [default: 0.001]
    #[arg(long, global = true)]
    pub lr: Option<f32>,
    /// Optimizer [default: adam]
    #[arg(long, global = true)]
    pub optimizer: Option<OptimizerArg>,
    /// SGD momentum [default: 0.9]
    #[arg(long, global = true)]
    pub momentum: Option<f32>,
    /// Stop after this many epochs without validation improvement [default: 5]
    #[arg(long, global = true)]
    pub early_stop_patience: Option<usize>,
    /// Fill the `seconds` column of training logs (makes logs run-dependent) [default: false]
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub record_timing: Option<bool>,

    /// Salt-and-pepper density for denoising training [default: 0.05]
    #[arg(long, global = true)]
    pub noise_density: Option<f64>,

    /// Decision threshold on the difference score, in pixels at 512x512 [default: 100]
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Cutoff on normalized SSIM dissimilarity (1 - s) / 2 [default: 0.3]
    #[arg(long, global = true)]
    pub cutoff: Option<f64>,
    /// Gaussian sigma for smoothing the SSIM map, 0 disables [default: 1]
    #[arg(long, global = true)]
    pub smooth_sigma: Option<f64>,
    /// Smallest component kept, in pixels [default: 4]
    #[arg(long, global = true)]
    pub min_area: Option<usize>,
    /// SSIM window size (odd) [default: 11]
    #[arg(long, global = true)]
    pub ssim_window: Option<usize>,
    /// SSIM Gaussian window sigma [default: 1.5]
    #[arg(long, global = true)]
    pub ssim_sigma: Option<f64>,
    /// SSIM luminance constant k1 [default: 0.01]
    #[arg(long, global = true)]
    pub ssim_k1: Option<f64>,
    /// SSIM contrast constant k2 [default: 0.03]
    #[arg(long, global = true)]
    pub ssim_k2: Option<f64>,

    /// Thresholds for `sweep`, comma separated [default: 50,100,150,200]
    #[arg(long, global = true, value_delimiter = ',', value_name = "LIST")]
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    model: ModelSection,
    train: TrainSection,
    noise: NoiseSection,
    localizer: LocalizerSection,
    eval: EvalSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    image_size: Option<usize>,
    channels: Option<Vec<usize>>,
    kernel: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    batch_size: Option<usize>,
    pretrain_epochs: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f32>,
    optimizer: Option<OptimizerArg>,
    momentum: Option<f32>,
    early_stop_patience: Option<usize>,
    record_timing: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct NoiseSection {
    noise_density: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LocalizerSection {
    threshold: Option<f64>,
    cutoff: Option<f64>,
    smooth_sigma: Option<f64>,
    min_area: Option<usize>,
    ssim_window: Option<usize>,
    ssim_sigma: Option<f64>,
    ssim_k1: Option<f64>,
    ssim_k2: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    thresholds: Option<Vec<f64>>,
}

/// Fully resolved settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub lr: f32,
    pub optimizer: OptimizerArg,
    pub momentum: f32,
    pub early_stop_patience: usize,
    pub record_timing: bool,
    pub noise_density: f64,
    pub threshold: f64,
    pub cutoff: f64,
    pub smooth_sigma: f64,
    pub min_area: usize,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub thresholds: Vec<f64>,
}

impl Default for Settings {
    fn default() -> Self {
        let model = ModelConfig::default();
        let a = TrainConfig::phase_a();
        let b = TrainConfig::phase_b();
        let loc = LocalizerConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            image_size: model.input_size.0,
            channels: model.channels,
            kernel: model.kernel,
            batch_size: a.batch_size,
            pretrain_epochs: a.epochs,
            epochs: b.epochs,
            lr: a.lr,
            optimizer: OptimizerArg::Adam,
            momentum: a.momentum,
            early_stop_patience: a.early_stop_patience,
            record_timing: false,
            noise_density: b.noise_density,
            threshold: loc.threshold,
            cutoff: loc.cutoff,
            smooth_sigma: loc.smooth_sigma,
            min_area: loc.min_area,
            ssim_window: loc.ssim.window,
            ssim_sigma: loc.ssim.sigma,
            ssim_k1: loc.ssim.k1,
            ssim_k2: loc.ssim.k2,
            thresholds: pcbae::metrics::DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

fn read_file(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl Settings {
    pub fn resolve(flags: &GlobalFlags) -> Result<Self> {
        let file = match &flags.config {
            Some(p) => read_file(p)?,
            None => FileConfig::default(),
        };
        let d = Settings::default();
        let s = Settings {
            seed: flags.seed.or(file.seed).unwrap_or(d.seed),
            out_dir: flags.out_dir.clone().or(file.out_dir).unwrap_or(d.out_dir),
            image_size: flags.image_size.or(file.model.image_size).unwrap_or(d.image_size),
            channels: flags.channels.clone().or(file.model.channels).unwrap_or(d.channels),
            kernel: flags.kernel.or(file.model.kernel).unwrap_or(d.kernel),
            batch_size: flags.batch_size.or(file.train.batch_size).unwrap_or(d.batch_size),
            pretrain_epochs: flags.pretrain_epochs.or(file.train.pretrain_epochs).unwrap_or(d.pretrain_epochs),
            epochs: flags.epochs.or(file.train.epochs).unwrap_or(d.epochs),
            lr: flags.lr.or(file.train.lr).unwrap_or(d.lr),
            optimizer: flags.optimizer.or(file.train.optimizer).unwrap_or(d.optimizer),
            momentum: flags.momentum.or(file.train.momentum).unwrap_or(d.momentum),
            early_stop_patience: flags
                .early_stop_patience
                .or(file.train.early_stop_patience)
                .unwrap_or(d.early_stop_patience),
            record_timing: flags.record_timing.or(file.train.record_timing).unwrap_or(d.record_timing),
            noise_density: flags.noise_density.or(file.noise.noise_density).unwrap_or(d.noise_density),
            threshold: flags.threshold.or(file.localizer.threshold).unwrap_or(d.threshold),
            cutoff: flags.cutoff.or(file.localizer.cutoff).unwrap_or(d.cutoff),
            smooth_sigma: flags.smooth_sigma.or(file.localizer.smooth_sigma).unwrap_or(d.smooth_sigma),
            min_area: flags.min_area.or(file.localizer.min_area).unwrap_or(d.min_area),
            ssim_window: flags.ssim_window.or(file.localizer.ssim_window).unwrap_or(d.ssim_window),
            ssim_sigma: flags.ssim_sigma.or(file.localizer.ssim_sigma).unwrap_or(d.ssim_sigma),
            ssim_k1: flags.ssim_k1.or(file.localizer.ssim_k1).unwrap_or(d.ssim_k1),
            ssim_k2: flags.ssim_k2.or(file.localizer.ssim_k2).unwrap_or(d.ssim_k2),
            thresholds: flags.thresholds.clone().or(file.eval.thresholds).unwrap_or(d.thresholds),
        };
        s.validate()?;
        Ok(s)
    }

    /// Checks everything up front so no work starts on a bad configuration.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config(Phase::A).validate()?;
        self.train_config(Phase::B).validate()?;
        self.localizer().validate()?;
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            bail!("thresholds must be a nonempty list of nonnegative numbers");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_size: (self.image_size, self.image_size),
            channels: self.channels.clone(),
            kernel: self.kernel,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        TrainConfig {
            phase,
            batch_size: self.batch_size,
            epochs: match phase {
                Phase::A => self.pretrain_epochs,
                Phase::B => self.epochs,
            },
            lr: self.lr,
            optimizer: self.optimizer.into(),
            momentum: self.momentum,
            noise_density: self.noise_density,
            seed: self.seed,
            early_stop_patience: self.early_stop_patience,
            checkpoint_dir: Some(self.out_dir.clone()),
        }
    }

    pub fn localizer(&self) -> LocalizerConfig {
        LocalizerConfig {
            ssim: SsimParams {
                window: self.ssim_window,
                sigma: self.ssim_sigma,
                k1: self.ssim_k1,
                k2: self.ssim_k2,
                dynamic_range: 1.0,
            },
            smooth_sigma: self.smooth_sigma,
            cutoff: self.cutoff,
            min_area: self.min_area,
            threshold: self.threshold,
        }
    }
}
