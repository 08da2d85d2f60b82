//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails that is not listed in `KNOWN_FAILURES`.

mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use common::*;
use gcg_core::attention::{AttentionArtifacts, AttentionKind, GcgConfig};
use gcg_core::data::{generate_dataset, load_dataset, SyntheticSpec};
use gcg_core::experiment::{examples_from, train_model, train_val_split, ExperimentConfig, COMPARISON_HEADER};
use gcg_core::heatmap::{export_heatmap, HeatmapChannel};
use gcg_core::metrics::{binary_auc, compute_metrics};
use gcg_core::model::{DropoutMasks, Mode, Model, ModelConfig};
use gcg_core::pnm::{self, RgbImage};
use gcg_core::training::{collect_grads, gradient_centralize, one_hot, regularization_on_tape, GcMode, RmsProp, TrainConfig};
use gcg_core::{checkpoint, cli, Parameter, ParamKind, Rng, Tape, Tensor};

/// Criteria whose stated target cannot be met by a correct implementation.
/// 4: the kappa closed form quoted for [[20,5],[10,15]] uses p_e = 0.515,
/// but that matrix's marginals give p_e = 0.5 and kappa = 0.4.
const KNOWN_FAILURES: &[usize] = &[4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_size: [16, 16, 3],
        backbone_channels: vec![4, 8],
        attention: AttentionKind::Gcg,
        head_widths: vec![8, 4],
        num_classes: 3,
        ..Default::default()
    }
}

fn total_objective(model: &mut Model, x: &Tensor, targets: &[f64], cfg: &TrainConfig) -> (Tape, gcg_core::Var) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = model.forward_with(&mut tape, xv, DropoutMasks::KeepAll).unwrap();
    let data = tape.cross_entropy(fwd.probs, targets, None).unwrap();
    let total = match regularization_on_tape(&mut tape, model, cfg) {
        Some(pen) => tape.add(data, pen).unwrap(),
        None => data,
    };
    (tape, total)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut model = Model::build(tiny_model_config(), 21).unwrap();
    let mut rng = Rng::new(22);
    // move every parameter off its initial value so biases and norm
    // affines are exercised away from 0 and 1
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += rng.uniform_range(-0.3, 0.3);
        }
    }
    model.set_mode(Mode::Train);
    let x = Tensor::uniform(&[4, 16, 16, 3], 0.0, 1.0, &mut rng);
    let targets = one_hot(&[0, 1, 2, 1], 3);
    let cfg = TrainConfig::default();

    let (mut tape, total) = total_objective(&mut model, &x, &targets, &cfg);
    tape.backward(total).unwrap();
    let analytic = collect_grads(&tape);

    let h = 1e-5;
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let (mut worst, mut worst_at, mut checked) = (0.0f64, String::new(), 0usize);
    for name in &names {
        let len = model.param(name).unwrap().data().len();
        for i in 0..len {
            let eval_at = |delta: f64, model: &Model| {
                let mut m = model.clone();
                let p = m.params_mut().into_iter().find(|p| &p.name == name).unwrap();
                p.data_mut()[i] += delta;
                let (tape, total) = total_objective(&mut m, &x, &targets, &cfg);
                tape.value(total)[0]
            };
            let numeric = (eval_at(h, &model) - eval_at(-h, &model)) / (2.0 * h);
            let a = analytic[name][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{i}]");
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-5 && secs < 60.0,
        format!("{checked} partials, max rel err {worst:.2e} at {worst_at}, {secs:.1}s"),
    )
}

fn criterion_2() -> Outcome {
    let mut worst = [0.0f64; 4];
    for seed in 0..20u64 {
        let mut rng = Rng::new(1000 + seed);
        let d = rng.int_range(2, 9);
        let cfg = GcgConfig {
            reduction: rng.int_range(1, 4),
            ..Default::default()
        };
        let (n, h, w) = (rng.int_range(1, 3), rng.int_range(1, 5), rng.int_range(1, 5));
        let r = random_map(n, h, w, d, &mut rng);
        let p = random_params(d, &cfg, &mut rng);
        let lib = run_library(&r, &p, &cfg);
        let ora = run_oracle(&r, &p);
        worst[0] = worst[0]
            .max(max_abs_diff(&lib.spatial_map, &ora.spatial_map))
            .max(max_abs_diff(&lib.context, &ora.context));
        worst[1] = worst[1].max(max_abs_diff(&lib.transformed, &ora.transformed));
        worst[2] = worst[2].max(max_abs_diff(&lib.guide, &ora.guide));
        worst[3] = worst[3]
            .max(max_abs_diff(&lib.gate, &ora.gate))
            .max(max_abs_diff(&lib.output, &ora.output));
    }
    outcome(
        worst.iter().all(|&e| e <= 1e-12),
        format!(
            "20 instances; max err context {:.1e}, channel {:.1e}, fuse {:.1e}, gating {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok && !failures.contains(&what.to_string()) {
            failures.push(what.to_string());
        }
    };
    for seed in 0..20u64 {
        let mut rng = Rng::new(2000 + seed);
        let (n, h, w, d) = (2, rng.int_range(2, 5), rng.int_range(2, 5), rng.int_range(2, 8));
        let cfg = GcgConfig::default();
        let r = random_map(n, h, w, d, &mut rng);
        let p = random_params(d, &cfg, &mut rng);
        let lib = run_library(&r, &p, &cfg);
        let hw = h * w;
        for i in 0..n {
            let s: f64 = lib.spatial_map[i * hw..(i + 1) * hw].iter().sum();
            check((s - 1.0).abs() < 1e-9, "spatial map sums to 1");
        }
        check(lib.gate.iter().all(|&g| g > 0.0 && g < 1.0), "gate in (0,1)");
        check(
            lib.output.iter().zip(r.data()).all(|(o, x)| o.abs() <= x.abs()),
            "|output| <= |R|",
        );
        for i in 0..n {
            for pos in 1..hw {
                for c in 0..d {
                    let at = |q: usize| (i * hw + q) * d + c;
                    let d0 = lib.guide[at(0)] - r.data()[at(0)];
                    let dq = lib.guide[at(pos)] - r.data()[at(pos)];
                    check((d0 - dq).abs() <= 1e-15, "R_g - R spatially constant");
                }
            }
        }
        let g: Vec<f64> = (0..d * 6).map(|_| rng.normal()).collect();
        let gc = gradient_centralize(&g, &[d, 6], GcMode::ZeroMean);
        for j in 0..6 {
            let m: f64 = (0..d).map(|row| gc[row * 6 + j]).sum::<f64>() / d as f64;
            check(m.abs() < 1e-12, "GC slices have zero mean");
        }
        // permute positions of every sample identically
        let mut perm: Vec<usize> = (0..hw).collect();
        rng.shuffle(&mut perm);
        let mut pr = r.data().to_vec();
        for i in 0..n {
            for (dst, &src) in perm.iter().enumerate() {
                for c in 0..d {
                    pr[(i * hw + dst) * d + c] = r.data()[(i * hw + src) * d + c];
                }
            }
        }
        let lp = run_library(&Tensor::new(r.shape().to_vec(), pr).unwrap(), &p, &cfg);
        let mut ok = max_abs_diff(&lp.context, &lib.context) < 1e-12
            && max_abs_diff(&lp.transformed, &lib.transformed) < 1e-12;
        for i in 0..n {
            for (dst, &src) in perm.iter().enumerate() {
                ok &= (lp.spatial_map[i * hw + dst] - lib.spatial_map[i * hw + src]).abs() < 1e-12;
                ok &= (lp.gate[i * hw + dst] - lib.gate[i * hw + src]).abs() < 1e-12;
                for c in 0..d {
                    ok &= (lp.output[(i * hw + dst) * d + c] - lib.output[(i * hw + src) * d + c]).abs() < 1e-12;
                }
            }
        }
        check(ok, "spatial permutation equivariance");
    }
    if failures.is_empty() {
        outcome(true, "20 instances; map sums, gate range, magnitude bound, broadcast constancy, GC means, permutation equivariance")
    } else {
        outcome(false, format!("violated: {}", failures.join("; ")))
    }
}

fn criterion_4() -> Outcome {
    let mut rng = Rng::new(4000);
    let mut worst = 0.0f64;
    let mut null_mismatch = 0;
    for _ in 0..50 {
        let (y, probs) = random_predictions(&mut rng);
        if probs[0].len() < 2 {
            continue;
        }
        let lib = compute_metrics(&y, &probs).unwrap();
        let bf = brute_metrics(&y, &probs);
        let mut diffs = vec![lib.accuracy - bf.accuracy, lib.kappa - bf.kappa];
        let m = &lib.macro_avg;
        let w = &lib.weighted_avg;
        for (a, b) in [m.precision, m.recall, m.f1, m.auc].iter().zip(bf.macro_avg) {
            diffs.push(a - b);
        }
        for (a, b) in [w.precision, w.recall, w.f1, w.auc].iter().zip(bf.weighted_avg) {
            diffs.push(a - b);
        }
        for (pc, b) in lib.per_class.iter().zip(&bf.per_class) {
            for (x, y) in [(pc.precision, b.0), (pc.recall, b.1), (pc.f1, b.2), (pc.auc, b.3)] {
                match (x, y) {
                    (Some(x), Some(y)) => diffs.push(x - y),
                    (None, None) => {}
                    _ => null_mismatch += 1,
                }
            }
        }
        worst = diffs.iter().fold(worst, |acc, d| acc.max(d.abs()));
    }
    let oracle_ok = worst <= 1e-9 && null_mismatch == 0;

    let perfect_y = [0, 1, 2, 0, 1, 2];
    let perfect: Vec<Vec<f64>> = perfect_y
        .iter()
        .map(|&k| (0..3).map(|c| if c == k { 0.9 } else { 0.05 }).collect())
        .collect();
    let perfect_kappa = compute_metrics(&perfect_y, &perfect).unwrap().kappa;

    let mut y = vec![0; 25];
    y.extend(vec![1; 25]);
    let mut preds = vec![0; 20];
    preds.extend(vec![1; 5]);
    preds.extend(vec![0; 10]);
    preds.extend(vec![1; 15]);
    let probs: Vec<Vec<f64>> = preds.iter().map(|&p| if p == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
    let kappa = compute_metrics(&y, &probs).unwrap().kappa;
    let stated_ok = (kappa - 0.381443).abs() <= 1e-6;

    let auc = binary_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]);
    let auc_ok = auc == Some(0.75);

    outcome(
        oracle_ok && perfect_kappa == 1.0 && stated_ok && auc_ok,
        format!(
            "brute-force max err {worst:.1e} ({null_mismatch} null mismatches); perfect kappa {perfect_kappa}; \
             [[20,5],[10,15]] kappa {kappa:.6} vs stated 0.381443 ({}; marginals give p_e 0.5, so 0.4 is exact); AUC {:?}",
            if stated_ok { "ok" } else { "mismatch" },
            auc
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut p = Parameter::new("theta", Tensor::scalar(0.0), ParamKind::Weight);
    let mut opt = RmsProp::new(1e-4, 0.9, 1e-7);
    opt.step([&mut p], &HashMap::from([("theta".to_string(), vec![1.0])])).unwrap();
    let delta = p.data()[0];
    outcome(
        (delta + 3.16227e-4).abs() <= 1e-9,
        format!("delta theta = {delta:.9e}"),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    let mut argv = vec!["gcg"];
    argv.extend_from_slice(args);
    cli::run(argv)
}

fn compact_config_path() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/compact.json")
        .to_string_lossy()
        .into_owned()
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let cfg = ExperimentConfig::compact();
    generate_dataset(&SyntheticSpec { seed: cfg.seed, ..SyntheticSpec::default() }, &data).unwrap();
    let ds = load_dataset(&data).unwrap();
    let (t, v) = train_val_split(&ds, cfg.train.holdout_fraction, cfg.seed);
    let train = examples_from(&t, &cfg.model).unwrap();
    let val = examples_from(&v, &cfg.model).unwrap();
    let (_, fit) = train_model(&cfg, &train, &val, |_| {}).unwrap();
    let smoke_ok = fit.best_val_accuracy >= 0.9 && fit.log.len() <= 30;
    let smoke_secs = start.elapsed().as_secs_f64();

    let out = dir.path().join("c");
    let variants = "none,spatial,channel_se,global_context,gated,gcg";
    let code = run_cli(&[
        "compare",
        "--config",
        &compact_config_path(),
        "--data",
        data.to_str().unwrap(),
        "--variants",
        variants,
        "--epochs",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap_or_default();
    let mut lines = csv.lines();
    let header_ok = lines.next() == Some(COMPARISON_HEADER.join(",").as_str());
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    let values_ok = rows.iter().all(|r| {
        r.len() == 7
            && r[1..].iter().enumerate().all(|(i, v)| {
                v.parse::<f64>().is_ok_and(|x| if i == 4 { (-1.0..=1.0).contains(&x) } else { (0.0..=1.0).contains(&x) })
            })
    });
    let json_ok = out.join("comparison.json").exists();
    let table_ok = code == 0 && header_ok && names == variants.split(',').collect::<Vec<_>>() && values_ok && json_ok;
    let secs = start.elapsed().as_secs_f64();
    let summary: Vec<String> = rows.iter().map(|r| format!("{}={}", r[0], r[1])).collect();
    outcome(
        smoke_ok && table_ok && secs < 900.0,
        format!(
            "gcg best val acc {:.3} at epoch {} ({smoke_secs:.0}s); compare csv {} rows, accuracy {}; total {secs:.0}s",
            fit.best_val_accuracy,
            fit.best_epoch,
            rows.len(),
            summary.join(" ")
        ),
    )
}

fn strip_timestamps(log: &str) -> Vec<serde_json::Value> {
    log.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("timestamp");
            v
        })
        .collect()
}

fn criterion_7() -> Outcome {
    let run = |root: &Path| {
        let p = |s: &str| root.join(s).to_string_lossy().into_owned();
        let cfg = compact_config_path();
        let codes = [
            run_cli(&["gen-data", "--seed", "7", "--out", &p("d")]),
            run_cli(&["train", "--seed", "7", "--config", &cfg, "--epochs", "2", "--data", &p("d"), "--out", &p("m")]),
            run_cli(&["eval", "--seed", "7", "--checkpoint", &p("m/best.ckpt"), "--data", &p("d"), "--out", &p("e")]),
        ];
        (
            codes,
            strip_timestamps(&fs::read_to_string(root.join("m/train_log.jsonl")).unwrap_or_default()),
            fs::read(root.join("e/metrics.json")).unwrap_or_default(),
            fs::read(root.join("m/best.ckpt")).unwrap_or_default(),
        )
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(a.path());
    let rb = run(b.path());
    let ok = ra.0 == [0, 0, 0] && rb.0 == [0, 0, 0] && ra.1.len() == 2 && ra.1 == rb.1 && ra.2 == rb.2 && ra.3 == rb.3 && !ra.3.is_empty();
    outcome(
        ok,
        format!(
            "exit codes {:?}/{:?}; logs equal {}; metrics equal {}; checkpoints equal {} ({} bytes)",
            ra.0,
            rb.0,
            ra.1 == rb.1,
            ra.2 == rb.2,
            ra.3 == rb.3,
            ra.3.len()
        ),
    )
}

/// Pixels equal to the maximum form exactly the block `rows x cols`.
fn brightest_block(img: &pnm::GrayImage) -> (usize, usize, usize, usize) {
    let max = *img.pixels.iter().max().unwrap();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..img.height {
        for x in 0..img.width {
            if img.get(x, y) == max {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    (y0, y1, x0, x1)
}

fn criterion_8() -> Outcome {
    // constructed gate with a single peak at (2, 1) on a 4x4 grid
    let mut gate = vec![0.2; 16];
    gate[2 * 4 + 1] = 0.9;
    let art = AttentionArtifacts {
        spatial_map: Tensor::filled(&[4, 4], 1.0 / 16.0),
        context: Tensor::zeros(&[2]),
        transformed_context: Tensor::zeros(&[2]),
        gate: Tensor::new(vec![4, 4, 1], gate).unwrap(),
        output: Tensor::zeros(&[4, 4, 2]),
    };
    let mut base = RgbImage::new(64, 64);
    base.pixels.fill(200);
    let hm = export_heatmap(&art, (64, 64), HeatmapChannel::Gate, &base).unwrap();
    let block_ok = brightest_block(&hm.gray) == (32, 48, 16, 32)
        && hm.gray.pixels.iter().filter(|&&p| p == 255).count() == 256;
    // dark blue at the peak: lowest red and green, blue dominant
    let peak = hm.overlay.get(20, 40);
    let cold = hm.overlay.get(0, 0);
    let blue_ok = peak[0] < cold[0] && peak[1] < cold[1] && peak[2] > peak[0];

    // end to end: the brightest block written by `explain` sits at the
    // argmax of the model's gate for the same image
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        input_size: [32, 32, 3],
        backbone_channels: vec![4, 8],
        head_widths: vec![8],
        ..Default::default()
    };
    let model = Model::build(cfg, 8).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    checkpoint::save(&model, &ckpt).unwrap();
    let mut img = RgbImage::new(64, 64);
    for y in 0..64 {
        for x in 0..64 {
            let i = (y * 64 + x) * 3;
            let blob = ((x as f64 - 44.0).powi(2) + (y as f64 - 18.0).powi(2)).sqrt() < 8.0;
            img.pixels[i..i + 3].copy_from_slice(if blob { &[255, 240, 110] } else { &[120, 50, 25] });
        }
    }
    let img_path = dir.path().join("probe.ppm");
    pnm::write_ppm(&img_path, &img).unwrap();
    let out = dir.path().join("h");
    let code = run_cli(&[
        "explain",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        img_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let gray = pnm::read_pgm(&out.join("probe.gate.pgm")).unwrap();
    let overlay_ok = out.join("probe.overlay.ppm").exists();
    let x = Tensor::new(vec![32, 32, 3], img.resized(32, 32).to_unit()).unwrap();
    let gm = model.infer(&x).unwrap().artifacts[0].gate_map();
    let (gh, gw) = (gm.shape()[0], gm.shape()[1]);
    let arg = gcg_core::metrics::argmax(gm.data());
    let (ah, aw) = (arg / gw, arg % gw);
    let (bh, bw) = (64 / gh, 64 / gw);
    let e2e = brightest_block(&gray);
    let e2e_ok = code == 0 && overlay_ok && e2e == (ah * bh, (ah + 1) * bh, aw * bw, (aw + 1) * bw);
    outcome(
        block_ok && blue_ok && e2e_ok,
        format!(
            "constructed peak block {:?}; overlay peak {peak:?} vs background {cold:?}; explain block {e2e:?} for gate argmax ({ah},{aw}) on {gh}x{gw}",
            brightest_block(&hm.gray)
        ),
    )
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "gradient oracle", criterion_1),
        (2, "equation oracles", criterion_2),
        (3, "invariant suite", criterion_3),
        (4, "metric oracle", criterion_4),
        (5, "optimizer step", criterion_5),
        (6, "smoke training + compare", criterion_6),
        (7, "pipeline determinism", criterion_7),
        (8, "explainability contract", criterion_8),
    ];
    let mut unexpected = Vec::new();
    for (id, name, f) in criteria {
        let o = f();
        let status = if o.pass {
            "PASS"
        } else if KNOWN_FAILURES.contains(&id) {
            "FAIL (known)"
        } else {
            unexpected.push(id);
            "FAIL"
        };
        println!("criterion {id} [{name}]: {status}: {}", o.detail);
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
