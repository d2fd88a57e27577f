//! End-to-end training behaviour on small in-memory boards.

use pcbae::checkpoint::Checkpoint;
use pcbae::dataset::{synthesize_board, DefectSpec, ImagePair, Label};
use pcbae::model::ModelConfig;
use pcbae::tensor::{adam_step, AdamConfig, AdamState, Tensor};
use pcbae::train::{evaluate_loss, train_phase_a_on, train_phase_b_on, Init, Task, TrainConfig, TrainData};

fn pairs(n: usize, size: usize, spec: &DefectSpec, seed: u64) -> Vec<ImagePair> {
    (0..n)
        .map(|i| {
            let b = synthesize_board(size, spec, seed + i as u64).unwrap();
            ImagePair {
                id: format!("b{i:03}"),
                defective: b.defective,
                template: b.template,
                label: Some(if b.defects.is_empty() { Label::Intact } else { Label::Defective }),
            }
        })
        .collect()
}

fn small_model(size: usize) -> ModelConfig {
    ModelConfig {
        input_size: (size, size),
        channels: vec![4, 8, 8],
        kernel: 3,
        seed: 11,
    }
}

fn mean_abs(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| f64::from((x - y).abs())).sum::<f64>() / n
}

fn infer_one(ckpt: &Checkpoint, img: &Tensor) -> Tensor {
    let (h, w) = ckpt.config.input_size;
    let model = ckpt.to_model().unwrap();
    model.infer(&img.clone().reshape(&[1, 1, h, w]).unwrap()).unwrap().reshape(&[1, h, w]).unwrap()
}

#[test]
fn adam_minimizes_quadratic_bowl() {
    let start = [1.5f32, -0.7, 0.3, -2.0, 0.05];
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let mut w = Tensor::new(vec![start.len()], start.to_vec()).unwrap();
    let mut state = AdamState::new([w.shape()]);
    for _ in 0..200 {
        let grad = Tensor::from_fn(w.shape(), |i| 2.0 * w.data()[i]);
        adam_step(&mut [&mut w], &[grad], &mut state, &cfg).unwrap();
    }

    // Scalar reference: the textbook update run per coordinate in f64.
    let (lr, b1, b2, eps) = (0.05f64, 0.9f64, 0.999f64, 1e-8f64);
    for (i, &s) in start.iter().enumerate() {
        let (mut x, mut m, mut v) = (f64::from(s), 0.0, 0.0);
        for t in 1..=200 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((f64::from(w.data()[i]) - x).abs() < 1e-4, "coordinate {i}: {} vs {x}", w.data()[i]);
    }
    let norm = w.data().iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!(norm < 1e-2, "|w| = {norm}");
}

#[test]
fn phase_a_loss_decreases() {
    let all = pairs(50, 32, &DefectSpec::none(), 100);
    let data = TrainData {
        train: all[..40].to_vec(),
        val: all[40..].to_vec(),
    };
    let cfg = TrainConfig {
        epochs: 6,
        seed: 1,
        ..TrainConfig::phase_a()
    };
    let (_, log) = train_phase_a_on(&data, &small_model(32), &cfg).unwrap();
    let first = &log.records[0];
    let last = log.records.last().unwrap();
    assert!(last.train_loss < first.train_loss, "{first:?} -> {last:?}");
    assert!(log.best_val_loss < first.val_loss);
    assert_eq!(log.total_steps, 6 * 20);
}

#[test]
fn single_image_is_memorized() {
    let data = TrainData {
        train: pairs(1, 32, &DefectSpec::none(), 5),
        val: Vec::new(),
    };
    let cfg = TrainConfig {
        epochs: 300,
        batch_size: 1,
        lr: 1e-2,
        early_stop_patience: 300,
        seed: 2,
        ..TrainConfig::phase_a()
    };
    let (ckpt, _) = train_phase_a_on(&data, &small_model(32), &cfg).unwrap();
    let t = &data.train[0].template;
    let err = mean_abs(&infer_one(&ckpt, t), t);
    assert!(err < 0.05, "mean |recon - template| = {err}");
}

#[test]
fn phase_b_removes_defects_and_best_checkpoint_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let all = pairs(24, 32, &DefectSpec::square(5), 300);
    let data = TrainData {
        train: all[..20].to_vec(),
        val: all[20..].to_vec(),
    };
    let a_cfg = TrainConfig {
        epochs: 40,
        seed: 3,
        early_stop_patience: 40,
        ..TrainConfig::phase_a()
    };
    let b_cfg = TrainConfig {
        epochs: 40,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..a_cfg.clone()
    };
    let (a, _) = train_phase_a_on(&data, &small_model(32), &a_cfg).unwrap();
    let (b, log) = train_phase_b_on(&data, Init::Pretrained(&a), &b_cfg).unwrap();

    // On the pixels a defect altered, the output sits closer to the template than the input does.
    let (mut out_err, mut in_err) = (0.0, 0.0);
    for p in &data.train {
        let out = infer_one(&b, &p.defective);
        for i in 0..p.template.len() {
            let (d, t) = (p.defective.data()[i], p.template.data()[i]);
            if d != t {
                out_err += f64::from((out.data()[i] - t).abs());
                in_err += f64::from((d - t).abs());
            }
        }
    }
    assert!(in_err > 0.0);
    assert!(out_err < 0.5 * in_err, "output L1 {out_err} vs input L1 {in_err} on defect pixels");

    let saved = Checkpoint::load(dir.path().join("phase_b_best.pcbae")).unwrap();
    assert_eq!(saved.to_bytes().unwrap(), b.to_bytes().unwrap());
    let task = Task::Denoise {
        density: b_cfg.noise_density,
    };
    let reloaded = evaluate_loss(&saved.to_model().unwrap(), &data.val, task, b_cfg.seed).unwrap();
    assert_eq!(reloaded, log.best_val_loss);
    assert_eq!(saved.meta.loss, Some(log.best_val_loss));
    assert_eq!(saved.meta.epoch, log.best_epoch);
}
