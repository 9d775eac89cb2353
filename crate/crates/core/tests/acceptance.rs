//! Acceptance checks. Each criterion prints one line; the process fails if
//! any blocking criterion fails.

use std::fs;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssmcount::backbone::ExpertGrouping;
use ssmcount::count_head::{image_count, CountGeometry, normalize_map, window_counts_from_dots, RedundantCountMap};
use ssmcount::data::{gen_synthetic, write_dataset, Dot, Placement, Sample, SynthConfig};
use ssmcount::metrics::compute_metrics;
use ssmcount::model::{CountModel, ModelConfig, Preset};
use ssmcount::nn::Parameterized;
use ssmcount::scan::{apply_order, build_order, restore_grid, Direction};
use ssmcount::ssm::{causal_convolve, discretize_zoh, lti_kernel, lti_scan_recurrent, selective_scan, SsmParams};
use ssmcount::train::{evaluate, evaluate_constant, loss_csv, train, TrainConfig};
use ssmcount::{FeatureGrid, FeatureSeq};

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

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Largest error relative to the output scale.
fn scaled_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(1e-12f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Direct evaluation of `y_t = Σ_k C·Ā^k·B̄·x_{t-k}` from the closed-form
/// ZOH coefficients.
fn direct_lti(a: &[f64], b: &[f64], c: &[f64], delta: f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|t| {
            let mut y = 0.0;
            for n in 0..a.len() {
                let a_bar = (delta * a[n]).exp();
                let b_bar = (a_bar - 1.0) / a[n] * b[n];
                for k in 0..=t {
                    y += c[n] * a_bar.powi(k as i32) * b_bar * x[t - k];
                }
            }
            y
        })
        .collect()
}

fn random_lti(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let a = (0..n).map(|_| -rng.gen_range(0.05..4.0)).collect();
    let b = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (a, b, c)
}

fn c1_lti_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut worst_oracle) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.gen_range(1..=8);
        let len = rng.gen_range(1..=64);
        let (a, b, c) = random_lti(&mut rng, n);
        let delta = rng.gen_range(0.001..1.0);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let disc = discretize_zoh(&a, &b, delta).unwrap();
        let rec = lti_scan_recurrent(&disc, &c, &x).unwrap();
        let conv = causal_convolve(&x, &lti_kernel(&disc, &c, len).unwrap());
        worst = worst.max(scaled_err(&rec, &conv));
        worst_oracle = worst_oracle.max(scaled_err(&rec, &direct_lti(&a, &b, &c, delta, &x)));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 1e-5 && worst_oracle < 1e-5 && secs < 10.0,
        format!("recurrence vs kernel {worst:.2e}, vs direct sum {worst_oracle:.2e}, {secs:.2}s"),
    )
}

fn c2_selective_degeneration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let channels = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=8);
        let len = rng.gen_range(1..=64);
        let a: Vec<f64> = (0..channels * n).map(|_| -rng.gen_range(0.05..4.0)).collect();
        let (_, b, c) = random_lti(&mut rng, n);
        let deltas: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.001..1.0)).collect();
        let d: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params = SsmParams::time_invariant(&a, &deltas, &b, &c, Some(&d));
        let data: Vec<f64> = (0..len * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seq = FeatureSeq::from_vec(len, channels, data.clone()).unwrap();
        let got = selective_scan(&params, &seq).unwrap();
        for ch in 0..channels {
            let x: Vec<f64> = (0..len).map(|t| data[t * channels + ch]).collect();
            let disc = discretize_zoh(&a[ch * n..(ch + 1) * n], &b, deltas[ch]).unwrap();
            let want: Vec<f64> = lti_scan_recurrent(&disc, &c, &x)
                .unwrap()
                .iter()
                .zip(&x)
                .map(|(y, x)| y + d[ch] * x)
                .collect();
            let have: Vec<f64> = (0..len).map(|t| got.step(t)[ch]).collect();
            worst = worst.max(scaled_err(&have, &want));
        }
    }
    outcome(worst < 1e-5, format!("max error vs LTI oracle {worst:.2e} over 50 cases"))
}

fn c3_scan_orders() -> Outcome {
    let mut failures = Vec::new();
    for h in 1..=8 {
        for w in 1..=8 {
            let grid = FeatureGrid::from_vec(h, w, 2, (0..h * w * 2).map(|v| v as f64).collect()).unwrap();
            for d in Direction::ALL {
                let fwd = build_order(d, h, w).unwrap();
                for order in [fwd.clone(), fwd.reversed()] {
                    let mut seen = vec![false; h * w];
                    order.forward.iter().for_each(|&c| seen[c] = true);
                    let perm = order.forward.len() == h * w && seen.iter().all(|&s| s);
                    let inv = (0..h * w).all(|k| order.inverse[order.forward[k]] == k);
                    let seq = apply_order(&grid, &order).unwrap();
                    let round = restore_grid(&seq, &order).unwrap() == grid;
                    if !(perm && inv && round) {
                        failures.push(format!("{d}{} {h}x{w}", if order.backward { "-back" } else { "" }));
                    }
                }
            }
            let v = build_order(Direction::Vertical, h, w).unwrap().forward;
            let ht = build_order(Direction::Horizontal, w, h).unwrap().forward;
            let dual = v.iter().zip(&ht).all(|(&cell, &tcell)| cell == (tcell % h) * w + tcell / h);
            let seq_dual = apply_order(&grid, &build_order(Direction::Vertical, h, w).unwrap()).unwrap()
                == apply_order(&grid.transpose(), &build_order(Direction::Horizontal, w, h).unwrap()).unwrap();
            if !(dual && seq_dual) {
                failures.push(format!("duality {h}x{w}"));
            }
        }
    }
    let f = |d| build_order(d, 2, 3).unwrap().forward;
    let enums = f(Direction::Diagonal) == [3, 0, 4, 1, 5, 2] && f(Direction::AntiDiagonal) == [0, 1, 3, 2, 4, 5];
    if !enums {
        failures.push("2x3 enumerations".into());
    }
    let detail = if failures.is_empty() {
        "64 grid sizes x 8 orders, V/H duality, 2x3 D/A enumerations".to_string()
    } else {
        format!("failed: {}", failures.join(", "))
    };
    outcome(failures.is_empty(), detail)
}

fn trainable(m: &CountModel) -> (Vec<f64>, Vec<f64>) {
    let (mut v, mut g) = (Vec::new(), Vec::new());
    m.visit("", &mut |_, p| {
        if p.trainable {
            v.extend_from_slice(&p.value);
            g.extend_from_slice(&p.grad);
        }
    });
    (v, g)
}

fn set_trainable(m: &mut CountModel, v: &[f64]) {
    let mut i = 0;
    m.visit_mut("", &mut |_, p| {
        if p.trainable {
            let n = p.len();
            p.value.copy_from_slice(&v[i..i + n]);
            i += n;
        }
    });
}

fn c4_gradient_check() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        directions: vec![Direction::Horizontal],
        grouping: ExpertGrouping::One,
        embed_dim: 2,
        depths: [1, 0, 0],
        state_dim: 4,
        head_hidden: 4,
        r: 16,
        ..ModelConfig::preset(Preset::Tiny)
    };
    let mut model = CountModel::new(cfg).unwrap();
    model.head.output.bias.as_mut().unwrap().value[0] = 2.0;
    // an input draw with no max-pool near-ties inside the difference stencil
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<FeatureGrid> = (0..2)
        .map(|_| FeatureGrid::from_vec(16, 16, 3, (0..768).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let coef = [0.7, -1.3];
    let (preds, cache) = model.forward(&batch, true).unwrap();
    model.zero_grad();
    model.backward(&preds, &cache, &coef, None);
    let (theta, analytic) = trainable(&model);
    let mut probe = model.clone();
    let mut loss = |v: &[f64]| -> f64 {
        set_trainable(&mut probe, v);
        let (p, _) = probe.forward(&batch, true).unwrap();
        p.iter().zip(&coef).map(|(p, c)| p.count * c).sum()
    };
    let h = 1e-4;
    let mut x = theta.clone();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let mut at = |d: f64| {
            x[i] = theta[i] + d;
            let v = loss(&x);
            x[i] = theta[i];
            v
        };
        let num = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        let a = analytic[i];
        let e = (a - num).abs() / a.abs().max(num.abs()).max(1e-5);
        worst = worst.max(e);
    }
    let secs = t0.elapsed().as_secs_f64();
    let n = theta.len();
    outcome(
        worst < 1e-5 && n <= 2000 && secs < 120.0,
        format!("{n} parameters, max relative error {worst:.2e}, {secs:.1}s"),
    )
}

fn c5_normalizer() -> Outcome {
    let t0 = Instant::now();
    let (h, w, r, s) = (64, 64, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // as stated (margin r) and with the margin at which every window holding
    // a dot has full coverage (2(r - s))
    let mut worst = [0.0f64; 2];
    for (slot, margin) in [r, 2 * (r - s)].into_iter().enumerate() {
        for _ in 0..100 {
            let n = rng.gen_range(0..=30);
            let dots: Vec<Dot> = (0..n)
                .map(|_| Dot {
                    x: rng.gen_range(margin as f64..(w - margin) as f64),
                    y: rng.gen_range(margin as f64..(h - margin) as f64),
                })
                .collect();
            let cr = window_counts_from_dots(&dots, h, w, r, s).unwrap();
            worst[slot] = worst[slot].max((image_count(&normalize_map(&cr)) - n as f64).abs());
        }
    }
    let [worst_count, worst_deep] = worst;
    // windows starting at or beyond r - s see full coverage K on every pixel
    let k = ((r / s) * (r / s)) as f64;
    let first = (r - s) / s;
    let (rows, cols) = (h / s, w / s);
    let mut worst_cons = 0.0f64;
    for _ in 0..100 {
        let values: Vec<f64> = (0..rows * cols)
            .map(|i| {
                let (a, b) = (i / cols, i % cols);
                if a >= first && b >= first {
                    rng.gen_range(0.0..5.0)
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = values.iter().sum();
        let cr = RedundantCountMap::new(CountGeometry::new(h, w, r, s).unwrap(), values).unwrap();
        worst_cons = worst_cons.max(rel(image_count(&normalize_map(&cr)), total / k));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_count < 1e-4 && worst_cons < 1e-6 && secs < 30.0,
        format!(
            "count error {worst_count:.2e} (dots >= r from borders), {worst_deep:.2e} (dots >= 2(r-s)), conservation error {worst_cons:.2e}, {secs:.2}s"
        ),
    )
}

fn c6_metrics() -> Outcome {
    let m = compute_metrics(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
    let exact = (m.mae - 3.0).abs() < 1e-12
        && (m.rmse - 10f64.sqrt()).abs() < 1e-12
        && (m.rmae_pct.unwrap() - 20.0).abs() < 1e-12
        && (m.rrmse_pct.unwrap() - 20.0).abs() < 1e-12
        && (m.r2.unwrap() - 0.6).abs() < 1e-12;
    let strategy = (2usize..20)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(1.0f64..100.0, n),
                prop::collection::vec(0.0f64..100.0, n),
                0.01f64..100.0,
            )
        })
        .prop_filter("non-constant ground truth", |(g, _, _)| g.iter().any(|v| (v - g[0]).abs() > 1e-3));
    let mut runner = TestRunner::new(Config {
        cases: 100,
        ..Config::default()
    });
    let scale = runner
        .run(&strategy, |(gt, pred, k)| {
            let a = compute_metrics(&gt, &pred).unwrap();
            let gs: Vec<f64> = gt.iter().map(|v| v * k).collect();
            let ps: Vec<f64> = pred.iter().map(|v| v * k).collect();
            let b = compute_metrics(&gs, &ps).unwrap();
            prop_assert!(rel(b.mae, k * a.mae) < 1e-9);
            prop_assert!(rel(b.rmse, k * a.rmse) < 1e-9);
            prop_assert!(rel(b.rmae_pct.unwrap(), a.rmae_pct.unwrap()) < 1e-9);
            prop_assert!(rel(b.rrmse_pct.unwrap(), a.rrmse_pct.unwrap()) < 1e-9);
            prop_assert!((b.r2.unwrap() - a.r2.unwrap()).abs() < 1e-9);
            Ok(())
        })
        .is_ok();
    outcome(
        exact && scale,
        format!(
            "MAE {} RMSE {:.6} rMAE {:?}% rRMSE {:?}% R2 {:?}; scale property {}",
            m.mae,
            m.rmse,
            m.rmae_pct.unwrap(),
            m.rrmse_pct.unwrap(),
            m.r2.unwrap(),
            if scale { "holds" } else { "violated" }
        ),
    )
}

fn synth(width: usize, count_max: usize, placement: Placement, seed: u64, n: usize) -> Vec<Sample> {
    let cfg = SynthConfig {
        width,
        height: width,
        count_min: 0,
        count_max,
        placement,
        seed,
        ..SynthConfig::default()
    };
    gen_synthetic(&cfg, n).unwrap()
}

fn c7_overfit() -> Outcome {
    let t0 = Instant::now();
    let cfg = SynthConfig {
        width: 64,
        height: 64,
        count_min: 1,
        count_max: 8,
        seed: 7,
        ..SynthConfig::default()
    };
    let samples = gen_synthetic(&cfg, 4).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        epochs: 200,
        batch_size: 4,
        seed: 7,
        ..TrainConfig::default()
    };
    let out = train(CountModel::new(ModelConfig::preset(Preset::Tiny)).unwrap(), &tc, &samples, &[], None).unwrap();
    let mae = evaluate(&out.model, &samples).unwrap().0.mae;
    let secs = t0.elapsed().as_secs_f64();
    outcome(mae < 0.5 && secs < 300.0, format!("training MAE {mae:.4}, {secs:.1}s"))
}

fn c8_generalization() -> Outcome {
    let t0 = Instant::now();
    let all = synth(128, 15, Placement::Uniform, 8, 250);
    let (train_set, test_set) = all.split_at(200);
    let tc = TrainConfig {
        lr: 1e-3,
        epochs: 8,
        batch_size: 8,
        seed: 8,
        ..TrainConfig::default()
    };
    let model = CountModel::new(ModelConfig::preset(Preset::Small)).unwrap();
    let out = train(model, &tc, train_set, &[], None).unwrap();
    let m = evaluate(&out.model, test_set).unwrap().0;
    let base = evaluate_constant(out.train_count_mean, test_set).unwrap().0;
    let r2 = m.r2.unwrap_or(f64::NEG_INFINITY);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        m.mae <= 0.5 * base.mae && r2 >= 0.7 && secs < 45.0 * 60.0,
        format!(
            "test MAE {:.3} vs baseline {:.3} (ratio {:.3}), R2 {r2:.3}, {:.0}s",
            m.mae,
            base.mae,
            m.mae / base.mae,
            secs
        ),
    )
}

fn c9_ablation() -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let all = synth(64, 12, Placement::DiagonalBand, 90 + seed, 90);
        let (train_set, test_set) = all.split_at(60);
        let tc = TrainConfig {
            lr: 1e-3,
            epochs: 15,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        };
        let mae = |directions: Vec<Direction>| {
            let cfg = ModelConfig {
                directions,
                seed,
                ..ModelConfig::preset(Preset::Tiny)
            };
            let out = train(CountModel::new(cfg).unwrap(), &tc, train_set, &[], None).unwrap();
            evaluate(&out.model, test_set).unwrap().0.mae
        };
        let four = mae(Direction::ALL.to_vec());
        let horizontal = mae(vec![Direction::Horizontal]);
        if four <= horizontal {
            wins += 1;
        }
        parts.push(format!("seed {seed}: HVDA {four:.3} H {horizontal:.3}"));
    }
    outcome(wins >= 2, format!("{wins}/3 seeds favour four directions ({})", parts.join("; ")))
}

fn c10_determinism() -> Outcome {
    let samples = synth(32, 6, Placement::Uniform, 10, 8);
    let tc = TrainConfig {
        lr: 1e-3,
        epochs: 3,
        batch_size: 3,
        seed: 10,
        ..TrainConfig::default()
    };
    let cfg = ModelConfig {
        r: 16,
        seed: 10,
        ..ModelConfig::preset(Preset::Tiny)
    };
    let run = || loss_csv(&train(CountModel::new(cfg.clone()).unwrap(), &tc, &samples, &[], None).unwrap().log);
    let same_loss = run() == run();

    let tmp = tempfile::tempdir().unwrap();
    let synth_cfg = SynthConfig {
        width: 48,
        height: 32,
        seed: 10,
        ..SynthConfig::default()
    };
    let dump = |name: &str| -> Vec<(String, Vec<u8>)> {
        let root = tmp.path().join(name);
        write_dataset(&root, &gen_synthetic(&synth_cfg, 6).unwrap(), &synth_cfg.manifest(6)).unwrap();
        let mut files = Vec::new();
        for dir in [root.clone(), root.join("images")] {
            let mut entries: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
            entries.sort();
            for p in entries.into_iter().filter(|p| p.is_file()) {
                files.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
            }
        }
        files
    };
    let same_synth = dump("a") == dump("b");
    outcome(
        same_loss && same_synth,
        format!("loss CSV identical: {same_loss}, synthetic dataset byte-identical: {same_synth}"),
    )
}

fn main() {
    // informational criteria do not fail the run
    let criteria: [(&str, bool, fn() -> Outcome); 10] = [
        ("1 LTI recurrence/kernel equivalence", true, c1_lti_equivalence),
        ("2 selective scan degenerates to LTI", true, c2_selective_degeneration),
        ("3 scan-order suite", true, c3_scan_orders),
        ("4 finite-difference gradient check", true, c4_gradient_check),
        ("5 normalizer exactness", true, c5_normalizer),
        ("6 metrics oracle", true, c6_metrics),
        ("7 overfit sanity", true, c7_overfit),
        ("8 desk-scale generalization", true, c8_generalization),
        ("9 direction ablation trend", false, c9_ablation),
        ("10 determinism", true, c10_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let start = Instant::now();
    for (name, blocking, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = check();
        let status = match (o.pass, blocking) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (informational)",
        };
        println!("criterion {name}: {status} - {}", o.detail);
        if !o.pass && blocking {
            failed += 1;
        }
    }
    println!("acceptance finished in {:.0?}", Duration::from_secs(start.elapsed().as_secs()));
    if failed > 0 {
        println!("{failed} blocking criteria failed");
        std::process::exit(1);
    }
}
