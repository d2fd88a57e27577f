//! `pcbae`: train the denoising autoencoder and inspect boards.
//!
//! Exit codes: 0 success / intact board, 1 defective board (`inspect`), 2 error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use config::{GlobalFlags, Settings};
use pcbae::checkpoint::Checkpoint;
use pcbae::dataset::{load_image, load_pairs, make_synthetic_dataset, scan_deeppcb, DefectSpec, Manifest, Split};
use pcbae::localize::{abs_diff, inspect, save_overlay, score_pairs, threshold_scale, DiffReport};
use pcbae::dataset::save_gray_png;
use pcbae::metrics::{emit_table, sweep_thresholds_scaled, TableFormat};
use pcbae::train::{evaluate_loss, train_phase_a, train_phase_b, Init, Phase, Task, TrainData, TrainLog, DEFAULT_SPLIT};

#[derive(Parser, Debug)]
#[command(name = "pcbae", version, about = "PCB defect detection with a denoising convolutional autoencoder")]
struct Cli {
    #[command(flatten)]
    global: GlobalFlags,

    /// Print the resolved configuration and per-epoch progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a manifest CSV from a DeepPCB-style tree or from generated boards
    MakeManifest {
        /// Root to scan for `<id>_test.<ext>` / `<id>_temp.<ext>` pairs
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        root: Option<PathBuf>,
        /// Generate N synthetic pairs of SIZE x SIZE pixels instead
        #[arg(long, num_args = 2, value_names = ["N", "SIZE"])]
        synthetic: Option<Vec<usize>>,
        /// Synthetic defects: none, default, square:N or random:MIN-MAX:MIN-MAX
        #[arg(long, default_value = "default")]
        defects: DefectSpec,
    },
    /// Phase A: train a plain autoencoder on intact templates
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Phase B: fine-tune a denoising autoencoder from a pretrained checkpoint
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Phase-A checkpoint to start from
        #[arg(long, required_unless_present = "cold")]
        pretrained: Option<PathBuf>,
        /// Start from fresh weights instead (no transfer)
        #[arg(long)]
        cold: bool,
    },
    /// Inspect one board; exit 0 if intact, 1 if defective
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
    },
    /// Score labelled boards and sweep decision thresholds
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Which entries to score
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Mean BCE of a checkpoint on a manifest split
    EvalLoss {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Evaluate reconstruction of templates (a) or denoising of defective boards (b)
        #[arg(long, value_enum, default_value_t = PhaseArg::B)]
        phase: PhaseArg,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PhaseArg {
    A,
    B,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let settings = Settings::resolve(&cli.global)?;
    if cli.verbose {
        env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
        eprintln!("{}", toml::to_string(&settings)?);
    }
    fs::create_dir_all(&settings.out_dir)
        .with_context(|| format!("creating {}", settings.out_dir.display()))?;
    match cli.command {
        Command::MakeManifest { root, synthetic, defects } => make_manifest(&settings, root, synthetic, &defects),
        Command::Pretrain { manifest } => pretrain(&settings, &manifest),
        Command::Train {
            manifest,
            pretrained,
            cold,
        } => train(&settings, &manifest, pretrained.as_deref(), cold),
        Command::Inspect { checkpoint, image } => inspect_board(&settings, &checkpoint, &image),
        Command::Sweep {
            checkpoint,
            manifest,
            split,
        } => sweep(&settings, &checkpoint, &manifest, split),
        Command::EvalLoss {
            checkpoint,
            manifest,
            split,
            phase,
        } => eval_loss(&settings, &checkpoint, &manifest, split, phase),
    }
}

fn make_manifest(s: &Settings, root: Option<PathBuf>, synthetic: Option<Vec<usize>>, defects: &DefectSpec) -> Result<ExitCode> {
    let manifest = match (root, synthetic.as_deref()) {
        (Some(root), _) => scan_deeppcb(&root).with_context(|| format!("scanning {}", root.display()))?,
        (None, Some(&[n, size])) => make_synthetic_dataset(n, size, defects, s.seed, s.out_dir.join("synthetic"))?,
        _ => bail!("pass --root DIR or --synthetic N SIZE"),
    };
    let manifest = manifest.tagged(DEFAULT_SPLIT, s.seed)?;
    let path = s.out_dir.join("manifest.csv");
    manifest.write_csv(&path)?;
    println!("{} pairs -> {}", manifest.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn write_logs(s: &Settings, log: &TrainLog, stem: &str) -> Result<()> {
    log.write_csv(s.out_dir.join(format!("{stem}_log.csv")), s.record_timing)?;
    fs::write(s.out_dir.join(format!("{stem}_loss.svg")), log.to_svg())?;
    Ok(())
}

fn report_training(log: &TrainLog) {
    let path = log.best_checkpoint.as_deref().map_or_else(String::new, |p| p.display().to_string());
    println!(
        "best epoch {} of {}: val loss {:.6} -> {}",
        log.best_epoch,
        log.records.len(),
        log.best_val_loss,
        path
    );
}

fn pretrain(s: &Settings, manifest: &Path) -> Result<ExitCode> {
    let m = Manifest::read_csv(manifest)?;
    let (_, log) = train_phase_a(&m, &s.model_config(), &s.train_config(Phase::A))?;
    write_logs(s, &log, "pretrain")?;
    report_training(&log);
    Ok(ExitCode::SUCCESS)
}

fn train(s: &Settings, manifest: &Path, pretrained: Option<&Path>, cold: bool) -> Result<ExitCode> {
    let m = Manifest::read_csv(manifest)?;
    let cfg = s.train_config(Phase::B);
    let log = match pretrained {
        Some(path) if !cold => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let model = s.model_config();
            if !model.same_architecture(&ckpt.config) {
                bail!(
                    "checkpoint {} was trained at {:?} with channels {:?}; configuration asks for {:?} with {:?}",
                    path.display(),
                    ckpt.config.input_size,
                    ckpt.config.channels,
                    model.input_size,
                    model.channels
                );
            }
            train_phase_b(&m, &ckpt, &cfg)?.1
        }
        _ => {
            let data = TrainData::from_manifest(&m, s.model_config().input_size, s.seed)?;
            pcbae::train::train_phase_b_on(&data, Init::Cold(&s.model_config()), &cfg)?.1
        }
    };
    write_logs(s, &log, "train")?;
    report_training(&log);
    Ok(ExitCode::SUCCESS)
}

fn inspect_board(s: &Settings, checkpoint: &Path, image: &Path) -> Result<ExitCode> {
    let model = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?
        .to_model()?;
    let board = load_image(image, model.config().input_size)?;
    let (mut report, recon) = inspect(&model, &board, &s.localizer())?;
    let stem = image.file_stem().and_then(|x| x.to_str()).unwrap_or("board").to_string();
    report.id = stem.clone();
    write_report(s, &report, &stem)?;
    save_overlay(&board, &report.contours, s.out_dir.join(format!("{stem}_overlay.png")))?;
    save_gray_png(&abs_diff(&board, &recon)?, s.out_dir.join(format!("{stem}_absdiff.png")))?;
    println!(
        "{}: {} (score {} px, threshold {:.2} px, {} region(s))",
        stem,
        if report.verdict.is_defective() { "defective" } else { "intact" },
        report.score,
        report.effective_threshold,
        report.contours.len()
    );
    Ok(if report.verdict.is_defective() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn write_report(s: &Settings, report: &DiffReport, stem: &str) -> Result<()> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(s.out_dir.join(format!("{stem}_report.json")), json)?;
    Ok(())
}

fn select(m: &Manifest, split: SplitArg) -> Manifest {
    let wanted = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
        SplitArg::All => return m.clone(),
    };
    m.with_split(wanted)
}

fn sweep(s: &Settings, checkpoint: &Path, manifest: &Path, split: SplitArg) -> Result<ExitCode> {
    let m = Manifest::read_csv(manifest)?;
    if let Some(e) = m.entries.iter().find(|e| e.label.is_none()) {
        bail!("manifest entry `{}` has no label; sweep needs labelled boards", e.id);
    }
    let mut chosen = select(&m, split);
    if chosen.is_empty() && !m.has_split_tags() {
        chosen = m.clone();
    }
    if chosen.is_empty() {
        bail!("no manifest entries in the requested split");
    }
    let model = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?
        .to_model()?;
    let size = model.config().input_size;
    let pairs = load_pairs(&chosen, size)?;
    let scored = score_pairs(&model, &pairs, &s.localizer())?;

    let mut scores_csv = String::from("id,defective,score,normalized_score\n");
    for b in &scored {
        scores_csv.push_str(&format!(
            "{},{},{},{}\n",
            b.report.id, b.defective, b.report.score, b.report.normalized_score
        ));
    }
    fs::write(s.out_dir.join("scores.csv"), scores_csv)?;

    let raw: Vec<(f64, bool)> = scored.iter().map(|b| (b.report.score as f64, b.defective)).collect();
    let table = sweep_thresholds_scaled(&raw, &s.thresholds, threshold_scale(size.0, size.1))?;
    let md = emit_table(&table, TableFormat::Markdown)?;
    fs::write(s.out_dir.join("sweep.csv"), emit_table(&table, TableFormat::Csv)?)?;
    fs::write(s.out_dir.join("sweep.md"), &md)?;
    fs::write(s.out_dir.join("sweep.json"), emit_table(&table, TableFormat::Json)?)?;
    print!("{md}");
    if let (Some(t), Some(a)) = (table.best_threshold, table.best_accuracy) {
        println!("best threshold {t} (accuracy {a:.3}) over {} boards", scored.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_loss(s: &Settings, checkpoint: &Path, manifest: &Path, split: SplitArg, phase: PhaseArg) -> Result<ExitCode> {
    let m = Manifest::read_csv(manifest)?;
    let chosen = select(&m, split);
    let model = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?
        .to_model()?;
    let pairs = load_pairs(&chosen, model.config().input_size)?;
    let task = match phase {
        PhaseArg::A => Task::Reconstruct,
        PhaseArg::B => Task::Denoise {
            density: s.noise_density,
        },
    };
    let loss = evaluate_loss(&model, &pairs, task, s.seed)?;
    println!("{loss}");
    Ok(ExitCode::SUCCESS)
}
