//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::process::Command;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use common::{sphere_volume, verdict, write_fixture};
use ndarray::Array2;
use nodseg_core::imaging_io::{load_patch_dataset, write_patch_dataset};
use nodseg_core::metrics::{assd, case_metrics, extract_contour, hausdorff, pixel_metrics};
use nodseg_core::network::std_layer::std_forward;
use nodseg_core::network::StdConfig;
use nodseg_core::objectives::total_loss;
use nodseg_core::roi_pipeline::{extract_roi, label_roi, preprocess_scans, PreprocessOptions, SliceSelection};
use nodseg_core::std_activation::{
    gaussian_kernel, smooth, std_energy, std_solve, std_solve_backward, std_trajectory, variational_sigmoid, StdParams,
};
use nodseg_core::trainer::{evaluate_model, lr_at, train, EvalConfig, FreezeSpec, TrainConfig};
use nodseg_core::{LossWeights, Mode, Model, ModelConfig, SlicePatch, PATCH_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn field(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.random_range(-scale..scale))
}

fn random_params(rng: &mut ChaCha8Rng) -> StdParams {
    StdParams {
        eps: rng.random_range(0.5..1.5),
        lambda1: rng.random_range(0.0..1.5),
        lambda2: rng.random_range(0.0..1.0),
        sigma: rng.random_range(0.8..2.0),
        ..Default::default()
    }
}

#[test]
fn criterion_01_std_reduces_to_sigmoid() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(8..=32), rng.random_range(8..=32));
        let u = field(&mut rng, h, w, 6.0);
        let c = rng.random_range(0.0..1.0);
        let p = StdParams {
            eps: rng.random_range(0.2..3.0),
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        };
        let x = std_solve(&u, c, &p).unwrap();
        let s = variational_sigmoid(&u, p.eps).unwrap();
        worst = worst.max((&x - &s).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-12 && secs < 10.0;
    verdict(1, "STD reduction", pass, &format!("max |x - sigmoid| = {worst:.2e}, {secs:.1}s"));
    assert!(pass);
}

fn energy_gradient(x: &Array2<f64>, u: &Array2<f64>, c: f64, p: &StdParams) -> Array2<f64> {
    let k = gaussian_kernel(p.sigma, p.radius()).unwrap();
    let a = smooth(&x.mapv(|v| 1.0 - v), &k);
    let b = smooth(x, &k);
    Array2::from_shape_fn(x.dim(), |i| {
        let v = x[i];
        -u[i] + p.eps * (v / (1.0 - v)).ln() + p.lambda1 * (a[i] - b[i]) + p.lambda2 * (1.0 - c)
    })
}

/// Projected gradient descent on the box with Armijo backtracking.
fn projected_descent(u: &Array2<f64>, c: f64, p: &StdParams, steps: usize) -> f64 {
    let lo = 1e-7;
    let project = |v: f64| v.clamp(lo, 1.0 - lo);
    let mut x = Array2::from_elem(u.dim(), 0.5);
    let mut e = std_energy(&x, u, c, p).unwrap();
    let mut step = 0.1;
    for _ in 0..steps {
        let g = energy_gradient(&x, u, c, p);
        loop {
            let cand = Array2::from_shape_fn(x.dim(), |i| project(x[i] - step * g[i]));
            let ec = std_energy(&cand, u, c, p).unwrap();
            let decrease: f64 = (&x - &cand).iter().zip(g.iter()).map(|(d, g)| d * g).sum();
            if ec <= e - 1e-4 * decrease || step < 1e-12 {
                if ec <= e {
                    x = cand;
                    e = ec;
                }
                break;
            }
            step *= 0.5;
        }
        step *= 2.0;
    }
    e
}

#[test]
fn criterion_02_energy_descent() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_rise: f64 = f64::NEG_INFINITY;
    for _ in 0..100 {
        let u = field(&mut rng, 16, 16, 4.0);
        let c = rng.random_range(0.0..1.0);
        let p = random_params(&mut rng);
        let traj = std_trajectory(&u, c, &p).unwrap();
        let e: Vec<f64> = traj.iterates.iter().map(|x| std_energy(x, &u, c, &p).unwrap()).collect();
        for w in e.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
    }
    let mut worst_gap: f64 = f64::NEG_INFINITY;
    for _ in 0..20 {
        let u = field(&mut rng, 8, 8, 4.0);
        let c = rng.random_range(0.0..1.0);
        let p = random_params(&mut rng);
        let ours = std_energy(&std_solve(&u, c, &p).unwrap(), &u, c, &p).unwrap();
        let generic = projected_descent(&u, c, &p, 500);
        worst_gap = worst_gap.max(ours - generic);
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_rise <= 1e-8 && worst_gap <= 1e-4 && secs < 120.0;
    verdict(
        2,
        "energy descent",
        pass,
        &format!("max step increase {worst_rise:.2e}, max gap to projected descent {worst_gap:.2e}, {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_gradient_fidelity() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(a.abs()).max(1e-10);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let u = field(&mut rng, 8, 8, 3.0);
        let wts = field(&mut rng, 8, 8, 1.0);
        let c = rng.random_range(0.0..1.0);
        let p = StdParams {
            kernel_radius: Some(4),
            ..random_params(&mut rng)
        };
        let loss = |u: &Array2<f64>, p: &StdParams| (std_solve(u, c, p).unwrap() * &wts).sum();
        let g = std_solve_backward(&u, c, &p, &wts).unwrap();
        let fd = |a: StdParams, b: StdParams| (loss(&u, &a) - loss(&u, &b)) / (2.0 * h);
        worst = worst
            .max(rel(g.eps, fd(StdParams { eps: p.eps + h, ..p }, StdParams { eps: p.eps - h, ..p })))
            .max(rel(g.lambda2, fd(StdParams { lambda2: p.lambda2 + h, ..p }, StdParams { lambda2: p.lambda2 - h, ..p })))
            .max(rel(g.sigma, fd(StdParams { sigma: p.sigma + h, ..p }, StdParams { sigma: p.sigma - h, ..p })));
        let mut num = 0.0;
        let mut den = 0.0;
        for idx in ndarray::indices((8, 8)) {
            let (mut up, mut um) = (u.clone(), u.clone());
            up[idx] += h;
            um[idx] -= h;
            let f = (loss(&up, &p) - loss(&um, &p)) / (2.0 * h);
            num += (g.u[idx] - f).powi(2);
            den += f * f;
        }
        worst = worst.max((num / den).sqrt());
    }

    // The classifier confidence enters as a constant.
    let dev = Device::Cpu;
    let u = Var::from_tensor(&Tensor::randn(0.0f64, 2.0, (2, 1, 8, 8), &dev).unwrap()).unwrap();
    let c = Var::from_tensor(&Tensor::new(&[0.3f64, 0.8], &dev).unwrap()).unwrap();
    let params = Tensor::new(&[1.0f64, 1.0, 0.5, 1.5], &dev).unwrap();
    let wts = Tensor::randn(0.0f64, 1.0, (2, 1, 8, 8), &dev).unwrap();
    let x = std_forward(u.as_tensor(), &params, c.as_tensor(), &StdConfig::default()).unwrap();
    let grads = (x * wts).unwrap().sum_all().unwrap().backward().unwrap();
    let c_grad_zero = match grads.get(c.as_tensor()) {
        None => true,
        Some(g) => g.to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0),
    };
    let u_grad = grads.get(u.as_tensor()).is_some();

    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-3 && c_grad_zero && u_grad && secs < 60.0;
    verdict(
        3,
        "gradient fidelity",
        pass,
        &format!("max relative error {worst:.2e}, gradient wrt c is zero: {c_grad_zero}, {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_prior_shrinks_mask() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let u = field(&mut rng, 32, 32, 4.0);
    let c = 0.25;
    let means: Vec<f64> = (0..10)
        .map(|k| {
            let strength = 0.3 * k as f64;
            let p = StdParams {
                lambda1: 0.0,
                lambda2: strength / (1.0 - c),
                ..Default::default()
            };
            std_solve(&u, c, &p).unwrap().mean().unwrap()
        })
        .collect();
    let secs = t0.elapsed().as_secs_f64();
    let pass = means.windows(2).all(|w| w[1] < w[0]) && secs < 10.0;
    verdict(
        4,
        "prior shrinkage",
        pass,
        &format!("mean(x) from {:.4} to {:.4} over 10 prior strengths, {secs:.2}s", means[0], means[9]),
    );
    assert!(pass);
}

fn oracle_contour(m: &Array2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = m.dim();
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[[y as usize, x as usize]];
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !at(y + dy, x + dx)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn oracle_one_sided(a: &[(usize, usize)], b: &[(usize, usize)], s: [f64; 2]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for &(ay, ax) in a {
        let mut best = f64::INFINITY;
        for &(by, bx) in b {
            let dy = (ay as f64 - by as f64) * s[0];
            let dx = (ax as f64 - bx as f64) * s[1];
            best = best.min((dy * dy + dx * dx).sqrt());
        }
        out.push(best);
    }
    out
}

#[test]
fn criterion_05_metrics_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut failures = Vec::new();
    let mut defined = 0;
    for case in 0..200 {
        let density = rng.random_range(0.0..0.6);
        let blob = |rng: &mut ChaCha8Rng| {
            if rng.random_bool(0.08) {
                return Array2::from_elem((32, 32), false);
            }
            let (cy, cx, r) = (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0), rng.random_range(0.0..10.0));
            Array2::from_shape_fn((32, 32), |(y, x)| {
                (y as f64 - cy).hypot(x as f64 - cx) <= r || rng.random_bool(density * 0.1)
            })
        };
        let pred = blob(&mut rng);
        let gt = blob(&mut rng);
        let s = [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)];

        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (p, g) in pred.iter().zip(gt.iter()) {
            match (*p, *g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let m = pixel_metrics(&pred, &gt).unwrap();
        if (m.tp, m.fp, m.fn_, m.tn) != (tp, fp, fn_, tn) {
            failures.push(format!("case {case}: confusion counts"));
        }
        let div = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
        if m.precision != div(tp, tp + fp) || m.sensitivity != div(tp, tp + fn_) || m.iou != div(tp, tp + fp + fn_) {
            failures.push(format!("case {case}: ratios"));
        }
        if let (Some(d), Some(j)) = (m.dice, m.iou) {
            if (d - 2.0 * j / (1.0 + j)).abs() > 1e-12 {
                failures.push(format!("case {case}: dice/iou identity"));
            }
        }

        let (cp, cg) = (oracle_contour(&pred), oracle_contour(&gt));
        if extract_contour(&pred) != cp || extract_contour(&gt) != cg {
            failures.push(format!("case {case}: contour"));
        }
        let full = case_metrics(&pred, &gt, s, "x", 0).unwrap();
        if cp.is_empty() || cg.is_empty() {
            if full.hd_mm.is_some() || full.assd_mm.is_some() || hausdorff(&cp, &cg, s).is_ok() || assd(&cp, &cg, s).is_ok() {
                failures.push(format!("case {case}: distance on empty contour"));
            }
            continue;
        }
        defined += 1;
        let a = oracle_one_sided(&cp, &cg, s);
        let b = oracle_one_sided(&cg, &cp, s);
        let hd = a.iter().chain(&b).fold(0.0f64, |m, &v| m.max(v));
        let sa: f64 = a.iter().sum();
        let sb: f64 = b.iter().sum();
        let asd = (sa + sb) / (a.len() + b.len()) as f64;
        if full.hd_mm != Some(hd) || full.assd_mm != Some(asd) {
            failures.push(format!("case {case}: hd {:?} vs {hd}, assd {:?} vs {asd}", full.hd_mm, full.assd_mm));
        }
        if hd < asd {
            failures.push(format!("case {case}: hd < assd"));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = failures.is_empty() && defined > 100 && secs < 60.0;
    verdict(
        5,
        "metrics oracle",
        pass,
        &format!("200 pairs, {defined} with defined distances, {} mismatches, {secs:.1}s", failures.len()),
    );
    assert!(pass, "{failures:?}");
}

fn random_patches(n: usize, seed: u64) -> Vec<SlicePatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (cy, cx, r) = (rng.random_range(40.0..88.0), rng.random_range(40.0..88.0), rng.random_range(4.0..20.0));
            let mask = Array2::from_shape_fn((PATCH_SIZE, PATCH_SIZE), |(y, x)| {
                ((y as f64 - cy).hypot(x as f64 - cx) <= r) as u8
            });
            SlicePatch {
                image: Array2::from_shape_fn((PATCH_SIZE, PATCH_SIZE), |_| rng.random_range(0.0..1.0f32)),
                class_label: 1,
                mask,
                lesion_id: format!("r{i}"),
                patient_id: format!("r{i}"),
                slice_index: 0,
                fold: Some(i % 2),
                spacing_yx: [0.7, 0.7],
            }
        })
        .collect()
}

#[test]
fn criterion_06_freeze_contract() {
    let t0 = Instant::now();
    let data = random_patches(2, 606);
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 2,
        ..TrainConfig::finetune()
    };
    let mut problems = Vec::new();
    for strategy in [None, Some("S1"), Some("S5"), Some("S9"), Some("C1"), Some("FC")] {
        let mut model = Model::new(&ModelConfig::tiny(), 6).unwrap();
        let before = model.store().snapshot().unwrap();
        let freeze = FreezeSpec::new(strategy);
        train(&mut model, &data, &cfg, &freeze, None, None).unwrap();
        let after = model.store().snapshot().unwrap();
        let mut changed: BTreeMap<&str, bool> = BTreeMap::new();
        for (name, e) in model.store().entries() {
            let moved = before[name] != after[name];
            *changed.entry(e.group.as_str()).or_default() |= moved;
            if Some(e.group.as_str()) == strategy && moved {
                problems.push(format!("{strategy:?}: frozen tensor {name} changed"));
            }
        }
        for (group, moved) in changed {
            if Some(group) != strategy && !moved {
                problems.push(format!("{strategy:?}: unfrozen group {group} did not change"));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = problems.is_empty() && secs < 300.0;
    verdict(
        6,
        "freeze contract",
        pass,
        &format!("strategies none,S1,S5,S9,C1,FC; {} violations, {secs:.1}s", problems.len()),
    );
    assert!(pass, "{problems:?}");
}

#[test]
fn criterion_07_shapes_and_determinism() {
    let t0 = Instant::now();
    let model = Model::new(&ModelConfig::default(), 7).unwrap();
    let image = Tensor::rand(0.0f32, 1.0, (2, 1, PATCH_SIZE, PATCH_SIZE), &Device::Cpu).unwrap();
    let out = model.forward(&image, Mode::Eval, true).unwrap();
    let full = [2, 1, PATCH_SIZE, PATCH_SIZE];
    let shapes_ok = out.u.dims() == full && out.x.dims() == full && out.c.dims() == [2];

    let data = random_patches(2, 707);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        seed: 11,
        ..TrainConfig::finetune()
    };
    let run = || {
        let mut m = Model::new(&ModelConfig::tiny(), 3).unwrap();
        train(&mut m, &data, &cfg, &FreezeSpec::default(), None, None).unwrap()
    };
    let (a, b) = (run(), run());
    let mut worst: f64 = 0.0;
    for (x, y) in a.steps.iter().zip(&b.steps) {
        for (p, q) in [(x.total, y.total), (x.dice, y.dice), (x.bce_seg, y.bce_seg), (x.bce_cls, y.bce_cls)] {
            worst = worst.max((p - q).abs());
        }
    }
    for (x, y) in a.log.iter().zip(&b.log) {
        worst = worst.max((x.train_dice - y.train_dice).abs()).max((x.lr - y.lr).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = shapes_ok && a.steps.len() == 3 && b.steps.len() == 3 && worst <= 1e-12 && secs < 120.0;
    verdict(
        7,
        "shape and determinism",
        pass,
        &format!(
            "u {:?} x {:?} c {:?}; 3 steps, max logged difference {worst:.1e}, {secs:.1}s",
            out.u.dims(),
            out.x.dims(),
            out.c.dims()
        ),
    );
    assert!(pass);
}

/// Ten nodule-bearing slices cropped from a synthetic sphere.
fn sphere_patches() -> Vec<SlicePatch> {
    let (vol, anns) = sphere_volume("ovf", (30, 128, 128), [1.0, 0.8, 0.8], &[([15.0, 51.0, 51.0], 20.0)], 8);
    let crop = extract_roi(&vol, &anns[0], 5.0).unwrap();
    let stack = label_roi(&crop, &anns[0], "ovf_n0", "ovf", 0.0, 255.0).unwrap();
    let nodule: Vec<SlicePatch> = stack.slices.into_iter().filter(|p| p.class_label == 1).collect();
    assert!(nodule.len() >= 19, "{} nodule slices", nodule.len());
    nodule
        .into_iter()
        .step_by(2)
        .take(10)
        .enumerate()
        .map(|(i, mut p)| {
            p.lesion_id = format!("ovf_{i}");
            p.fold = Some(0);
            p
        })
        .collect()
}

#[test]
fn criterion_08_overfit_smoke() {
    let t0 = Instant::now();
    let data = sphere_patches();
    let mut model = Model::new(&ModelConfig::tiny(), 8).unwrap();
    // 10 patches in batches of 2: five steps per epoch.
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 2,
        std_enabled: true,
        seed: 8,
        ..TrainConfig::pretrain()
    };
    let out = train(&mut model, &data, &cfg, &FreezeSpec::default(), None, None).unwrap();
    let final_dice = out.log.last().unwrap().train_dice;
    let report = evaluate_model(&model, &data, true, &EvalConfig::default()).unwrap();
    let hd_defined = report.cases.iter().filter(|c| c.hd_mm.is_some()).count();
    let secs = t0.elapsed().as_secs_f64();
    let pass = out.steps.len() == 200 && final_dice >= 0.95 && hd_defined >= 9 && secs < 600.0;
    verdict(
        8,
        "overfit smoke",
        pass,
        &format!(
            "{} steps, final train dice {final_dice:.4}, eval dice {:.4}, HD defined {hd_defined}/10, {secs:.0}s",
            out.steps.len(),
            report.summary.dice.unwrap_or(f64::NAN)
        ),
    );
    assert!(pass);
}

fn nodseg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_nodseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn criterion_09_pipeline_round_trip() {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (vols, csv) = (root.join("volumes"), root.join("annotations.csv"));
    let anns = write_fixture(&vols, &csv);
    let mut problems = Vec::new();

    let opts = PreprocessOptions {
        i_min: 0.0,
        i_max: 255.0,
        half_depth_mm: 5.0,
        selection: SliceSelection {
            keep_ratio: 1.0,
            k_folds: 5,
            seed: 9,
            test_fraction: 0.0,
        },
    };
    let (patches, summary) = preprocess_scans(&vols, &csv, &opts).unwrap();
    if summary.lesions != anns.len() {
        problems.push(format!("{} lesions for {} annotations", summary.lesions, anns.len()));
    }
    let lib_dir = root.join("lib_patches");
    let manifest = write_patch_dataset(&patches, &lib_dir).unwrap();
    let (_, loaded) = load_patch_dataset(&lib_dir).unwrap();
    let same = loaded.len() == patches.len()
        && loaded.iter().zip(&patches).all(|(a, b)| {
            a.image.iter().zip(b.image.iter()).all(|(x, y)| (x - y).abs() <= 1e-7)
                && a.mask == b.mask
                && (a.class_label, &a.lesion_id, a.slice_index, a.fold) == (b.class_label, &b.lesion_id, b.slice_index, b.fold)
        });
    if !same {
        problems.push("dataset changed across write/load".into());
    }
    for (e, p) in manifest.entries.iter().zip(&loaded) {
        if (e.class_label == 1) != p.mask.iter().any(|&m| m == 1) {
            problems.push(format!("label invariant broken at {}:{}", e.lesion_id, e.slice_index));
        }
    }
    let mut fold_of: BTreeMap<&str, BTreeSet<Option<usize>>> = BTreeMap::new();
    for p in &loaded {
        fold_of.entry(p.lesion_id.as_str()).or_default().insert(p.fold);
    }
    let folds: BTreeSet<usize> = fold_of.values().flatten().flatten().copied().collect();
    if fold_of.values().any(|f| f.len() != 1 || f.contains(&None)) || folds != (0..5).collect() {
        problems.push(format!("fold assignment is not a partition: {fold_of:?}"));
    }

    let patch_dir = root.join("patches");
    let config = serde_json::json!({
        "data": {
            "volumes_dir": vols,
            "annotations_csv": csv,
            "patch_dir": patch_dir,
            "seed": 9
        },
        "model": {
            "seg_widths": [4, 8, 8, 16, 16],
            "cls_base_width": 2,
            "cls_blocks": [1, 1, 1, 1]
        },
        "train": {
            "batch_size": 4,
            "finetune": {"epochs": 1, "lr0": 0.001, "decay_factor": 0.75, "decay_period_epochs": 5, "std_enabled": true}
        }
    });
    let cfg_path = root.join("run.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let run_dir = root.join("run");
    let eval_dir = root.join("eval");
    let ckpt = run_dir.join("checkpoint");
    let steps: [(&str, Vec<&str>); 3] = [
        ("preprocess", vec!["preprocess", "--config", cfg]),
        ("finetune", vec!["finetune", "--config", cfg, "--out", run_dir.to_str().unwrap()]),
        (
            "evaluate",
            vec![
                "evaluate",
                "--config",
                cfg,
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--split",
                "val",
                "--out",
                eval_dir.to_str().unwrap(),
            ],
        ),
    ];
    for (name, args) in &steps {
        let out = nodseg(args);
        if !out.status.success() {
            problems.push(format!("{name} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
            break;
        }
    }
    let metrics_ok = fs::read_to_string(eval_dir.join("metrics.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .is_some_and(|v| metrics_schema_ok(&v));
    if !metrics_ok {
        problems.push("metrics.json missing or malformed".into());
    }
    for f in ["metrics.csv", "resolved_config.json"] {
        if !eval_dir.join(f).exists() {
            problems.push(format!("{f} missing"));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = problems.is_empty() && secs < 300.0;
    verdict(
        9,
        "pipeline round trip",
        pass,
        &format!("{} lesions, {} slices, CLI chain and metrics.json ok: {}, {secs:.1}s", summary.lesions, summary.slices, metrics_ok),
    );
    assert!(pass, "{problems:?}");
}

fn metrics_schema_ok(v: &serde_json::Value) -> bool {
    let number_or_null = |x: &serde_json::Value| x.is_number() || x.is_null();
    let summary_keys = ["precision", "sensitivity", "dice", "iou", "hd_mm", "assd_mm"];
    let summary = &v["summary"];
    let cases = v["cases"].as_array();
    v["aggregation"].is_string()
        && summary_keys.iter().all(|k| number_or_null(&summary[k]))
        && summary_keys.iter().all(|k| v["excluded"][k].is_u64())
        && cases.is_some_and(|c| {
            !c.is_empty()
                && c.iter().all(|case| {
                    case["lesion_id"].is_string()
                        && ["tp", "fp", "fn_", "tn"].iter().all(|k| case[k].is_u64())
                        && summary_keys.iter().all(|k| number_or_null(&case[k]))
                })
        })
}

#[test]
fn criterion_10_schedule_and_loss_arithmetic() {
    let ft = TrainConfig::finetune();
    let rates = [lr_at(0, &ft), lr_at(5, &ft), lr_at(17, &ft)];
    let expected = [0.001, 0.00075, 4.21875e-4];
    let lr_ok = rates.iter().zip(expected).all(|(a, b)| (a - b).abs() <= 1e-15);

    let dev = Device::Cpu;
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let x = Tensor::rand(0.0f64, 1.0, (3, 1, 16, 16), &dev).unwrap();
        let g = Tensor::rand(0.0f64, 1.0, (3, 1, 16, 16), &dev).unwrap().ge(0.5).unwrap().to_dtype(DType::F64).unwrap();
        let c = Tensor::rand(0.0f64, 1.0, 3, &dev).unwrap();
        let y = Tensor::new(&[1.0f64, 0.0, (seed % 2) as f64], &dev).unwrap();
        let terms = total_loss(&x, &g, &c, &y, LossWeights::default()).unwrap();
        let total = terms.total.to_scalar::<f64>().unwrap();
        let sum = terms.dice.to_scalar::<f64>().unwrap()
            + terms.bce_seg.to_scalar::<f64>().unwrap()
            + terms.bce_cls.to_scalar::<f64>().unwrap();
        let logged = terms.values().unwrap();
        worst = worst
            .max((total - sum).abs())
            .max((logged.total - (logged.dice + logged.bce_seg + logged.bce_cls)).abs());
    }
    let pass = lr_ok && worst <= 1e-12;
    verdict(
        10,
        "schedule and loss arithmetic",
        pass,
        &format!("lr {rates:?}, max |total - sum of components| {worst:.1e}"),
    );
    assert!(pass);
}
