//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion (bypassing libtest output capture) and then asserts.
//!
//! The paper-scale check is opt-in: set `DEEPPCB_ROOT` and run with
//! `cargo test -p pcbae --test acceptance -- --ignored`.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcbae::checkpoint::Checkpoint;
use pcbae::dataset::{load_image, load_pairs, make_synthetic_dataset, mask_path_for, scan_deeppcb, DefectSpec, Manifest};
use pcbae::localize::{
    label_components, score_pairs, ssim_map, threshold_scale, Contour, LocalizerConfig, Mask, Plane, SsimParams,
};
use pcbae::metrics::{emit_table, metrics, sweep_thresholds_scaled, ConfusionCounts, Metrics, TableFormat, DEFAULT_THRESHOLDS};
use pcbae::model::ModelConfig;
use pcbae::tensor::{
    batchnorm_backward, batchnorm_forward, bce_loss, bce_loss_backward, conv2d_backward, conv2d_forward, maxpool2d,
    maxpool2d_backward, relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_bce_grad, upsample_nearest,
    upsample_nearest_backward, BatchNormState, ConvSpec, Mode, Tensor,
};
use pcbae::train::{train_phase_a_on, train_phase_b_on, Init, TrainConfig, TrainData, TrainLog, DEFAULT_SPLIT};

fn report(criterion: &str, ok: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{} criterion {criterion}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = out.flush();
}

// ---------------------------------------------------------------------------
// Criterion 1: finite-difference gradient checks.

const H: f32 = 1e-3;
const GRAD_TOL: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `Σ r·y` accumulated in f64.
fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
}

/// Relative error with a floor of 1 on the scale, so tiny gradients are
/// compared absolutely.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central differences of `loss` with respect to every element of `x`,
/// using the perturbation actually representable in f32.
fn check(x: &Tensor, analytic: &Tensor, mut loss: impl FnMut(&Tensor) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += H;
        minus.data_mut()[i] -= H;
        let step = f64::from(plus.data()[i]) - f64::from(minus.data()[i]);
        let numeric = (loss(&plus) - loss(&minus)) / step;
        worst = worst.max(rel_err(f64::from(analytic.data()[i]), numeric));
    }
    worst
}

/// Values bounded away from zero, so a ±h step never crosses the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05f32..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced by more than 2h, so max-pool winners never change.
fn distinct_values(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.01).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..=2), rng.gen_range(1..=3), 2 * rng.gen_range(2..=4), 2 * rng.gen_range(2..=4)]
}

fn gradient_cases(rng: &mut ChaCha8Rng) -> Vec<(String, f64)> {
    let mut cases = Vec::new();
    for _ in 0..3 {
        // Convolution: input, weight and bias.
        let shape = small_shape(rng);
        let k = ([1, 3, 5][rng.gen_range(0..3)], [1, 3][rng.gen_range(0..2)]);
        let spec = ConvSpec {
            in_channels: shape[1],
            out_channels: rng.gen_range(1..=3),
            kernel: k,
            stride: (rng.gen_range(1..=2), rng.gen_range(1..=2)),
            padding: (rng.gen_range(0..=k.0 / 2), rng.gen_range(0..=k.1 / 2)),
        };
        if spec.output_size(shape[2], shape[3]).is_err() {
            continue;
        }
        let x = rand_tensor(rng, &shape, -1.0, 1.0);
        let w = rand_tensor(rng, &spec.weight_shape(), -0.5, 0.5);
        let b = rand_tensor(rng, &[spec.out_channels], -0.5, 0.5);
        let y = conv2d_forward(&x, &w, &b, &spec).unwrap();
        let r = rand_tensor(rng, y.shape(), -1.0, 1.0);
        let g = conv2d_backward(&r, &x, &w, &spec).unwrap();
        let label = format!("conv {shape:?} k{k:?} s{:?} p{:?}", spec.stride, spec.padding);
        cases.push((
            format!("{label} input"),
            check(&x, &g.grad_input, |x| project(&conv2d_forward(x, &w, &b, &spec).unwrap(), &r)),
        ));
        cases.push((
            format!("{label} weight"),
            check(&w, &g.grad_weight, |w| project(&conv2d_forward(&x, w, &b, &spec).unwrap(), &r)),
        ));
        cases.push((
            format!("{label} bias"),
            check(&b, &g.grad_bias, |b| project(&conv2d_forward(&x, &w, b, &spec).unwrap(), &r)),
        ));

        // ReLU.
        let shape = small_shape(rng);
        let x = away_from_zero(rng, &shape);
        let r = rand_tensor(rng, &shape, -1.0, 1.0);
        let g = relu_backward(&r, &x).unwrap();
        cases.push((format!("relu {shape:?}"), check(&x, &g, |x| project(&relu(x), &r))));

        // Sigmoid.
        let shape = small_shape(rng);
        let x = rand_tensor(rng, &shape, -4.0, 4.0);
        let r = rand_tensor(rng, &shape, -1.0, 1.0);
        let g = sigmoid_backward(&r, &sigmoid(&x)).unwrap();
        cases.push((format!("sigmoid {shape:?}"), check(&x, &g, |x| project(&sigmoid(x), &r))));

        // Max pooling.
        let shape = small_shape(rng);
        let x = distinct_values(rng, &shape);
        let (y, idx) = maxpool2d(&x, 2, 2).unwrap();
        let r = rand_tensor(rng, y.shape(), -1.0, 1.0);
        let g = maxpool2d_backward(&r, &idx).unwrap();
        cases.push((format!("maxpool {shape:?}"), check(&x, &g, |x| project(&maxpool2d(x, 2, 2).unwrap().0, &r))));

        // Nearest upsampling.
        let shape = small_shape(rng);
        let x = rand_tensor(rng, &shape, -1.0, 1.0);
        let y = upsample_nearest(&x, 2).unwrap();
        let r = rand_tensor(rng, y.shape(), -1.0, 1.0);
        let g = upsample_nearest_backward(&r, 2).unwrap();
        cases.push((format!("upsample {shape:?}"), check(&x, &g, |x| project(&upsample_nearest(x, 2).unwrap(), &r))));

        // Batch norm in training mode: input, gamma and beta.
        let mut shape = small_shape(rng);
        shape[0] = 2;
        let x = rand_tensor(rng, &shape, -1.0, 1.0);
        let mut st = BatchNormState::new(shape[1]);
        st.gamma = rand_tensor(rng, &[shape[1]], 0.5, 1.5);
        st.beta = rand_tensor(rng, &[shape[1]], -0.5, 0.5);
        let base = st.clone();
        let (y, cache) = batchnorm_forward(&x, &mut st, Mode::Train).unwrap();
        let r = rand_tensor(rng, y.shape(), -1.0, 1.0);
        let g = batchnorm_backward(&r, &cache, &base).unwrap();
        let bn = |x: &Tensor, s: &BatchNormState| project(&batchnorm_forward(x, &mut s.clone(), Mode::Train).unwrap().0, &r);
        cases.push((format!("batchnorm {shape:?} input"), check(&x, &g.grad_input, |x| bn(x, &base))));
        cases.push((
            format!("batchnorm {shape:?} gamma"),
            check(&base.gamma, &g.grad_gamma, |gm| {
                bn(
                    &x,
                    &BatchNormState {
                        gamma: gm.clone(),
                        ..base.clone()
                    },
                )
            }),
        ));
        cases.push((
            format!("batchnorm {shape:?} beta"),
            check(&base.beta, &g.grad_beta, |bt| {
                bn(
                    &x,
                    &BatchNormState {
                        beta: bt.clone(),
                        ..base.clone()
                    },
                )
            }),
        ));

        // BCE with respect to predictions, and the fused sigmoid + BCE path.
        let shape = small_shape(rng);
        let p = rand_tensor(rng, &shape, 0.05, 0.95);
        let t = Tensor::from_fn(&shape, |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let g = bce_loss_backward(&p, &t).unwrap();
        cases.push((format!("bce {shape:?}"), check(&p, &g, |p| bce_loss(p, &t).unwrap())));

        let z = rand_tensor(rng, &shape, -3.0, 3.0);
        let g = sigmoid_bce_grad(&sigmoid(&z), &t).unwrap();
        cases.push((format!("sigmoid+bce {shape:?}"), check(&z, &g, |z| bce_loss(&sigmoid(z), &t).unwrap())));
    }
    cases
}

#[test]
fn criterion_1_gradient_suite() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = gradient_cases(&mut rng);
    let (worst_name, worst) = cases
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap();
    let secs = started.elapsed().as_secs_f64();
    let ok = cases.len() >= 20 && worst <= GRAD_TOL && secs < 30.0;
    report(
        "1 (gradient suite)",
        ok,
        &format!(
            "{} random shape checks, max relative error {worst:.2e} ({worst_name}), {secs:.1} s",
            cases.len()
        ),
    );
    for (name, e) in &cases {
        assert!(*e <= GRAD_TOL, "{name}: relative error {e:.3e}");
    }
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 2: oracle equivalence.

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Tensor {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let ((kh, kw), (sh, sw), co) = (spec.kernel, spec.stride, spec.out_channels);
    let (ph, pw) = (spec.padding.0 as isize, spec.padding.1 as isize);
    let oh = (h + 2 * spec.padding.0 - kh) / sh + 1;
    let ow = (wd + 2 * spec.padding.1 - kw) / sw + 1;
    let mut out = vec![0f32; n * co * oh * ow];
    for bi in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = f64::from(b.data()[o]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * sh + ky) as isize - ph;
                                let ix = (ox * sw + kx) as isize - pw;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * c + ci) * kh + ky) * kw + kx];
                                acc += f64::from(xv) * f64::from(wv);
                            }
                        }
                    }
                    out[((bi * co + o) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

fn conv_oracle_max_err(rng: &mut ChaCha8Rng) -> (usize, f64) {
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 50 {
        let k = ([1, 3, 5, 7][rng.gen_range(0..4)], [1, 3, 5][rng.gen_range(0..3)]);
        let spec = ConvSpec {
            in_channels: rng.gen_range(1..=4),
            out_channels: rng.gen_range(1..=5),
            kernel: k,
            stride: (rng.gen_range(1..=3), rng.gen_range(1..=3)),
            padding: (rng.gen_range(0..=k.0 / 2), rng.gen_range(0..=k.1 / 2)),
        };
        let shape = [rng.gen_range(1..=3), spec.in_channels, rng.gen_range(3..=17), rng.gen_range(3..=17)];
        if spec.output_size(shape[2], shape[3]).is_err() {
            continue;
        }
        let x = rand_tensor(rng, &shape, -1.0, 1.0);
        let w = rand_tensor(rng, &spec.weight_shape(), -1.0, 1.0);
        let b = rand_tensor(rng, &[spec.out_channels], -1.0, 1.0);
        let fast = conv2d_forward(&x, &w, &b, &spec).unwrap();
        let slow = naive_conv(&x, &w, &b, &spec);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            worst = worst.max(f64::from((a - b).abs()));
        }
        cases += 1;
    }
    (cases, worst)
}

/// Depth-first flood fill from each unlabelled pixel in raster order.
fn flood_fill_labels(mask: &Mask) -> Vec<usize> {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let mut labels = vec![0usize; mask.data.len()];
    let mut next = 0;
    for start in 0..mask.data.len() {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        let mut stack = vec![(start as isize / w, start as isize % w)];
        while let Some((y, x)) = stack.pop() {
            if y < 0 || x < 0 || y >= h || x >= w {
                continue;
            }
            let i = (y * w + x) as usize;
            if !mask.data[i] || labels[i] != 0 {
                continue;
            }
            labels[i] = next;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    stack.push((y + dy, x + dx));
                }
            }
        }
    }
    labels
}

fn contours_from_labels(labels: &[usize], width: usize) -> Vec<Contour> {
    let count = labels.iter().copied().max().unwrap_or(0);
    let mut out = Vec::new();
    for id in 1..=count {
        let px: Vec<(usize, usize)> = labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == id)
            .map(|(i, _)| (i % width, i / width))
            .collect();
        let x0 = px.iter().map(|p| p.0).min().unwrap();
        let x1 = px.iter().map(|p| p.0).max().unwrap();
        let y0 = px.iter().map(|p| p.1).min().unwrap();
        let y1 = px.iter().map(|p| p.1).max().unwrap();
        out.push(Contour {
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
            area: px.len(),
        });
    }
    out
}

fn components_match_oracle(rng: &mut ChaCha8Rng) -> usize {
    let mut checked = 0;
    for density in [0.1, 0.3, 0.45, 0.6, 0.8] {
        for _ in 0..20 {
            let mask = Mask::new(32, 32, (0..32 * 32).map(|_| rng.gen_bool(density)).collect());
            let (labels, comps) = label_components(&mask);
            let oracle = flood_fill_labels(&mask);
            assert_eq!(labels, oracle, "label images differ");
            assert_eq!(comps, contours_from_labels(&oracle, 32));
            assert_eq!(comps.iter().map(|c| c.area).sum::<usize>(), mask.count());
            checked += 1;
        }
    }
    checked
}

fn brute_metrics(outcomes: &[(bool, bool)]) -> Metrics {
    let tp = outcomes.iter().filter(|&&(p, t)| p && t).count() as f64;
    let fp = outcomes.iter().filter(|&&(p, t)| p && !t).count() as f64;
    let tn = outcomes.iter().filter(|&&(p, t)| !p && !t).count() as f64;
    let fn_ = outcomes.iter().filter(|&&(p, t)| !p && t).count() as f64;
    let div = |a: f64, b: f64| if b == 0.0 { None } else { Some(a / b) };
    let recall = div(tp, tp + fn_);
    let precision = div(tp, tp + fp);
    let f_score = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Metrics {
        recall,
        precision,
        selectivity: div(tn, tn + fp),
        accuracy: div(tp + tn, tp + tn + fp + fn_),
        f_score,
    }
}

fn metrics_match_recount(rng: &mut ChaCha8Rng) -> usize {
    let mut cases = 0;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..60);
        let outcomes: Vec<(bool, bool)> = (0..n).map(|_| (rng.gen_bool(0.5), rng.gen_bool(0.5))).collect();
        assert_eq!(metrics(&ConfusionCounts::tally(outcomes.iter().copied())), brute_metrics(&outcomes));
        cases += 1;
    }
    // Sweep rows against a direct count over 20 labelled scores.
    for _ in 0..100 {
        let scores: Vec<(f64, bool)> = (0..20).map(|_| (rng.gen_range(0.0..300.0), rng.gen_bool(0.5))).collect();
        let table = sweep_thresholds_scaled(&scores, &DEFAULT_THRESHOLDS, 1.0).unwrap();
        for row in &table.rows {
            let outcomes: Vec<(bool, bool)> = scores.iter().map(|&(s, t)| (s > row.threshold, t)).collect();
            assert_eq!(row.metrics, brute_metrics(&outcomes));
        }
        cases += 1;
    }
    cases
}

/// Straight-line SSIM: explicit 2-D Gaussian window and mirrored indices per pixel.
fn direct_ssim(a: &Plane, b: &Plane, p: &SsimParams) -> Vec<f64> {
    let r = (p.window / 2) as isize;
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut weights = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            weights.push((dy, dx, (-((dx * dx + dy * dy) as f64) / (2.0 * p.sigma * p.sigma)).exp()));
        }
    }
    let total: f64 = weights.iter().map(|w| w.2).sum();
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let mut out = Vec::with_capacity(a.data.len());
    for y in 0..a.height as isize {
        for x in 0..a.width as isize {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &(dy, dx, wt) in &weights {
                let wt = wt / total;
                let yy = mirror(y + dy, a.height);
                let xx = mirror(x + dx, a.width);
                let (va, vb) = (a.at(yy, xx), b.at(yy, xx));
                ma += wt * va;
                mb += wt * vb;
                saa += wt * va * va;
                sbb += wt * vb * vb;
                sab += wt * va * vb;
            }
            let var_a = (saa - ma * ma).max(0.0);
            let var_b = (sbb - mb * mb).max(0.0);
            let cov = sab - ma * mb;
            out.push(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2)));
        }
    }
    out
}

fn rand_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
    Plane::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn ssim_oracle_max_err(rng: &mut ChaCha8Rng) -> (usize, f64) {
    let p = SsimParams::default();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (h, w) in [(24, 20), (11, 11), (5, 9), (40, 33)] {
        for _ in 0..3 {
            let a = rand_plane(rng, h, w);
            // Correlated partner so SSIM spans a useful range.
            let b = Plane::new(
                h,
                w,
                a.data
                    .iter()
                    .map(|&v| (0.7 * v + 0.3 * rng.gen_range(0.0..1.0)).clamp(0.0, 1.0))
                    .collect(),
            )
            .unwrap();
            let fast = ssim_map(&a, &b, &p).unwrap();
            let slow = direct_ssim(&a, &b, &p);
            for (x, y) in fast.data.iter().zip(&slow) {
                worst = worst.max((x - y).abs());
            }
            let mean_slow = slow.iter().sum::<f64>() / slow.len() as f64;
            worst = worst.max((fast.mean() - mean_slow).abs());
            cases += 1;
        }
    }
    (cases, worst)
}

#[test]
fn criterion_2_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (conv_cases, conv_err) = conv_oracle_max_err(&mut rng);
    let cc_cases = components_match_oracle(&mut rng);
    let metric_cases = metrics_match_recount(&mut rng);
    let (ssim_cases, ssim_err) = ssim_oracle_max_err(&mut rng);
    let secs = started.elapsed().as_secs_f64();
    let ok = conv_err <= 1e-5 && ssim_err <= 1e-6 && secs < 60.0;
    report(
        "2 (oracle equivalence)",
        ok,
        &format!(
            "conv {conv_cases} cases max |err| {conv_err:.2e}; components {cc_cases} masks exact; \
             metrics {metric_cases} cases exact; SSIM {ssim_cases} pairs max |err| {ssim_err:.2e}; {secs:.1} s"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 3: SSIM invariants.

#[test]
fn criterion_3_ssim_invariants() {
    let p = SsimParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut self_err = 0.0f64;
    let mut symmetric = true;
    for (h, w) in [(16, 16), (31, 17), (64, 48), (7, 5)] {
        let a = rand_plane(&mut rng, h, w);
        let b = rand_plane(&mut rng, h, w);
        let aa = ssim_map(&a, &a, &p).unwrap();
        self_err = self_err.max(aa.data.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max));
        symmetric &= ssim_map(&a, &b, &p).unwrap() == ssim_map(&b, &a, &p).unwrap();
    }
    let zeros = Plane::filled(32, 32, 0.0);
    let ones = Plane::filled(32, 32, 1.0);
    let c1 = (0.01f64 * 1.0).powi(2);
    let closed = c1 / (1.0 + c1);
    let const_err = ssim_map(&zeros, &ones, &p)
        .unwrap()
        .data
        .iter()
        .map(|v| (v - closed).abs())
        .fold(0.0, f64::max);
    let ok = self_err <= 1e-6 && symmetric && const_err <= 1e-7;
    report(
        "3 (SSIM invariants)",
        ok,
        &format!(
            "self-SSIM max |1 - s| {self_err:.1e}; symmetric: {symmetric}; 0-vs-1 vs C1/(1+C1) = {closed:.6e}: max |err| {const_err:.1e}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criteria 4, 6, 7: desk-scale synthetic runs.

const DESK: usize = 128;
const DESK_PAIRS: usize = 200;
const DESK_EPOCHS: usize = 10;
const DESK_SEED: u64 = 7;
const BLOB_MIN_AREA: usize = 25;

struct DeskRun {
    _dir: tempfile::TempDir,
    data: TrainData,
    phase_a: Checkpoint,
    log_a: TrainLog,
    log_b: TrainLog,
    sweep_csv: String,
    sweep_md: String,
    best_threshold: Option<f64>,
    best_accuracy: f64,
    test_boards: (usize, usize),
    localized: usize,
    seconds: f64,
}

fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: DESK_EPOCHS,
        seed,
        ..TrainConfig::phase_a()
    }
}

fn desk_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..ModelConfig::with_size(DESK)
    }
}

/// Ground-truth defect blobs from a mask image.
fn gt_blobs(mask_path: PathBuf) -> Vec<Contour> {
    let m = load_image(mask_path, (DESK, DESK)).unwrap();
    let p = Plane::from_tensor(&m).unwrap();
    let mask = Mask::new(DESK, DESK, p.data.iter().map(|&v| v > 0.5).collect());
    label_components(&mask).1
}

/// Generate, split, train both phases, then score the test split.
fn desk_run() -> DeskRun {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_synthetic_dataset(DESK_PAIRS, DESK, &DefectSpec::default(), DESK_SEED, dir.path()).unwrap();
    let (train, val, test) = manifest.partitions(DEFAULT_SPLIT, DESK_SEED).unwrap();
    assert_eq!((train.len(), val.len(), test.len()), (160, 20, 20));
    let data = TrainData {
        train: load_pairs(&train, (DESK, DESK)).unwrap(),
        val: load_pairs(&val, (DESK, DESK)).unwrap(),
    };

    let cfg = desk_train_config(DESK_SEED);
    let (phase_a, log_a) = train_phase_a_on(&data, &desk_model_config(DESK_SEED), &cfg).unwrap();
    let (phase_b, log_b) = train_phase_b_on(&data, Init::Pretrained(&phase_a), &cfg).unwrap();
    let model = phase_b.to_model().unwrap();

    let pairs = load_pairs(&test, (DESK, DESK)).unwrap();
    let localizer = LocalizerConfig::default();
    let scored = score_pairs(&model, &pairs, &localizer).unwrap();
    let defective = scored.iter().filter(|s| s.defective).count();
    let raw: Vec<(f64, bool)> = scored.iter().map(|s| (s.report.score as f64, s.defective)).collect();
    let table = sweep_thresholds_scaled(&raw, &DEFAULT_THRESHOLDS, threshold_scale(DESK, DESK)).unwrap();

    let localized = test_localized(&test, &scored);
    DeskRun {
        _dir: dir,
        data,
        phase_a,
        log_a,
        log_b,
        sweep_csv: emit_table(&table, TableFormat::Csv).unwrap(),
        sweep_md: emit_table(&table, TableFormat::Markdown).unwrap(),
        best_threshold: table.best_threshold,
        best_accuracy: table.best_accuracy.unwrap_or(0.0),
        test_boards: (defective, scored.len() - defective),
        localized,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Defective test boards on which every ground-truth blob of at least
/// `BLOB_MIN_AREA` pixels meets a reported box.
fn test_localized(test: &Manifest, scored: &[pcbae::localize::ScoredBoard]) -> usize {
    test.entries
        .iter()
        .zip(scored.chunks(2))
        .filter(|(e, s)| {
            let report = &s[0].report;
            gt_blobs(mask_path_for(&e.defective).unwrap())
                .iter()
                .filter(|b| b.area >= BLOB_MIN_AREA)
                .all(|b| report.contours.iter().any(|c| c.intersects(b.x, b.y, b.w, b.h)))
        })
        .count()
}

fn desk() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(desk_run)
}

#[test]
fn criterion_4_desk_end_to_end() {
    let run = desk();
    let (defective, intact) = run.test_boards;
    let loc_rate = run.localized as f64 / defective as f64;
    let ok = (defective, intact) == (20, 20) && run.best_accuracy >= 0.90 && loc_rate >= 0.80;
    report(
        "4 (desk end-to-end)",
        ok,
        &format!(
            "{defective}+{intact} held-out boards, best threshold {:?} accuracy {:.3} (need >= 0.90); \
             localized {}/{defective} = {:.2} (need >= 0.80); {:.0} s",
            run.best_threshold, run.best_accuracy, run.localized, loc_rate, run.seconds
        ),
    );
    let mut out = std::io::stdout().lock();
    let _ = write!(out, "{}", run.sweep_md);
    drop(out);
    assert!(ok);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_6_transfer_beats_cold_start() {
    let run = desk();
    let mut transfer = vec![run.log_b.final_val_loss()];
    let mut cold = Vec::new();
    for seed in [DESK_SEED, DESK_SEED + 1, DESK_SEED + 2] {
        let cfg = desk_train_config(seed);
        if seed != DESK_SEED {
            let (a, _) = train_phase_a_on(&run.data, &desk_model_config(seed), &cfg).unwrap();
            transfer.push(train_phase_b_on(&run.data, Init::Pretrained(&a), &cfg).unwrap().1.final_val_loss());
        } else {
            // The criterion-4 run already holds this seed's phase-A weights.
            assert_eq!(run.phase_a.config.seed, seed);
        }
        cold.push(
            train_phase_b_on(&run.data, Init::Cold(&desk_model_config(seed)), &cfg)
                .unwrap()
                .1
                .final_val_loss(),
        );
    }
    let (mt, mc) = (median(transfer.clone()), median(cold.clone()));
    let ok = mt <= mc;
    report(
        "6 (transfer vs cold start)",
        ok,
        &format!("median final val loss transfer {mt:.5} vs cold {mc:.5}; transfer {transfer:.5?}, cold {cold:.5?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_7_determinism() {
    let first = desk();
    let second = desk_run();
    let logs_equal =
        first.log_a.to_csv(false) == second.log_a.to_csv(false) && first.log_b.to_csv(false) == second.log_b.to_csv(false);
    let sweep_equal = first.sweep_csv == second.sweep_csv;
    let ok = logs_equal && sweep_equal;
    report(
        "7 (determinism)",
        ok,
        &format!("TrainLog CSVs byte-identical: {logs_equal}; sweep CSV byte-identical: {sweep_equal}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 5: paper-scale check on DeepPCB (opt-in).

#[test]
fn criterion_5_paper_scale_is_opt_in() {
    if std::env::var_os("DEEPPCB_ROOT").is_none() {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(
            out,
            "SKIP criterion 5 (paper scale): set DEEPPCB_ROOT and run `cargo test -p pcbae --test acceptance -- --ignored`"
        );
    }
}

#[test]
#[ignore = "paper-scale: needs DEEPPCB_ROOT and hours of CPU time"]
fn criterion_5_paper_scale_deeppcb() {
    const SIZE: usize = 256;
    let Some(root) = std::env::var_os("DEEPPCB_ROOT") else {
        report("5 (paper scale)", false, "DEEPPCB_ROOT is not set");
        panic!("DEEPPCB_ROOT is not set");
    };
    let started = Instant::now();
    let manifest = scan_deeppcb(PathBuf::from(root)).unwrap();
    let seed = 0;
    let (train, val, test) = manifest.partitions(DEFAULT_SPLIT, seed).unwrap();
    let data = TrainData {
        train: load_pairs(&train, (SIZE, SIZE)).unwrap(),
        val: load_pairs(&val, (SIZE, SIZE)).unwrap(),
    };
    let model_cfg = ModelConfig {
        seed,
        ..ModelConfig::with_size(SIZE)
    };
    let a_cfg = TrainConfig {
        seed,
        ..TrainConfig::phase_a()
    };
    let b_cfg = TrainConfig {
        seed,
        ..TrainConfig::phase_b()
    };
    let (a, _) = train_phase_a_on(&data, &model_cfg, &a_cfg).unwrap();
    let (b, log_b) = train_phase_b_on(&data, Init::Pretrained(&a), &b_cfg).unwrap();
    let model = b.to_model().unwrap();
    let pairs = load_pairs(&test, (SIZE, SIZE)).unwrap();
    let scored = score_pairs(&model, &pairs, &LocalizerConfig::default()).unwrap();
    let raw: Vec<(f64, bool)> = scored.iter().map(|s| (s.report.score as f64, s.defective)).collect();
    let table = sweep_thresholds_scaled(&raw, &DEFAULT_THRESHOLDS, threshold_scale(SIZE, SIZE)).unwrap();
    let acc: Vec<f64> = table.rows.iter().map(|r| r.metrics.accuracy.unwrap_or(0.0)).collect();
    let interior = acc[1].max(acc[2]) > acc[0].max(acc[3]);
    let best = acc.iter().copied().fold(0.0, f64::max);
    let ok = interior && best >= 0.90;
    report(
        "5 (paper scale)",
        ok,
        &format!(
            "{} test pairs at {SIZE}px; accuracy by threshold {acc:.3?} (interior maximum: {interior}); best {best:.3} (need >= 0.90); \
             final val loss {:.4}; {:.0} s",
            pairs.len(),
            log_b.final_val_loss(),
            started.elapsed().as_secs_f64()
        ),
    );
    let mut out = std::io::stdout().lock();
    let _ = write!(out, "{}", emit_table(&table, TableFormat::Markdown).unwrap());
    drop(out);
    assert!(ok);
}
