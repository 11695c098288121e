//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; exits non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use ecfm::events::{bin_events, simulate_events, Event, EventStream, Geometry};
use ecfm::fusion::{activate, ecfm_forward, energy_weights, EcfmParams, EnergyConfig};
use ecfm::harness::ablation::cmd_ablation;
use ecfm::harness::suite::{gradcheck_suite, score_report};
use ecfm::harness::train::{cmd_eval, cmd_gen_data, rmse_mae};
use ecfm::harness::RunConfig;
use ecfm::model::{build_model, save_checkpoint, CheckpointMeta};
use ecfm::pgm::Image;
use ecfm::tensor::{RngState, Tape, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn grad_suite() -> Outcome {
    let items = match gradcheck_suite(0) {
        Ok(items) => items,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let ops = items.iter().filter(|i| i.kind == "op").count();
    let worst = |kind: &str| {
        items
            .iter()
            .filter(|i| i.kind == kind)
            .map(|i| i.max_rel_error)
            .fold(0.0f64, f64::max)
    };
    let failed: Vec<&str> = items.iter().filter(|i| !i.passed).map(|i| i.name.as_str()).collect();
    let has_composed = items.iter().any(|i| i.name == "ecfm_then_total_loss" && i.passed);
    outcome(
        failed.is_empty() && has_composed && ops == 37,
        format!(
            "{ops} ops worst {:.2e} (< 1e-5), {} graphs worst {:.2e} (< 1e-4), failed {failed:?}",
            worst("op"),
            items.len() - ops,
            worst("graph")
        ),
    )
}

fn estimator_grid() -> Outcome {
    let mut worst_rel = 0.0f64;
    let mut worst_se = 0.0f64;
    let mut failures = Vec::new();
    let mut case = 0;
    for mu in [0.0, 1.0, -1.0] {
        for sigma in [0.25, 1.0, 2.0] {
            for z in [0.0, 1.0, -1.0] {
                case += 1;
                let r = match score_report(mu, sigma, z, 1000, 200, case) {
                    Ok(r) => r,
                    Err(e) => return outcome(false, format!("score error: {e}")),
                };
                let rel = (r.fast.mean / r.closed_form - 1.0).abs();
                let se = (r.full.mean - r.fast.mean).abs() / r.difference_stderr();
                worst_rel = worst_rel.max(rel);
                worst_se = worst_se.max(se);
                if rel >= 0.01 || se >= 2.0 {
                    failures.push(format!("(μ={mu}, σ={sigma}, z={z}): rel {rel:.4}, {se:.2} SE"));
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("27 points, worst fast rel error {:.3}%, worst full-fast gap {worst_se:.2} SE {failures:?}", 100.0 * worst_rel),
    )
}

fn attention_bounds() -> Outcome {
    let cfg = EnergyConfig::default();
    let floor = 1.0 / (1.0 + (-0.5f64).exp());
    let mut rng = RngState::new(3);
    let (mut bad_e, mut bad_peak, mut bad_a, mut bad_sum) = (0, 0, 0, 0);
    let mut min_a = f64::INFINITY;
    for trial in 0..10_000 {
        let (c, h, w) = (1 + rng.below(3), 1 + rng.below(8), 1 + rng.below(8));
        let scale = (4.0 * rng.normal()).exp2();
        let mut data: Vec<f64> = (0..c * h * w).map(|_| scale * rng.normal()).collect();
        // every other map is symmetric about a centre pixel, so one pixel sits at the mean
        let centred = trial % 2 == 1 && (h * w) % 2 == 1;
        if centred {
            let m = h * w;
            for plane in data.chunks_exact_mut(m) {
                let centre = plane[m / 2];
                for k in 0..m / 2 {
                    plane[m - 1 - k] = 2.0 * centre - plane[k];
                }
                // make the mean exact in floating point
                let mean = plane.iter().sum::<f64>() / m as f64;
                plane[m / 2] = mean;
            }
        }
        let f = Tensor::new([1, c, h, w], data.clone()).unwrap();
        let mut tape = Tape::new();
        let fv = tape.constant(f);
        let e = energy_weights(&mut tape, fv, &cfg).unwrap();
        let a = activate(&mut tape, e).unwrap();
        let sm = tape.softmax(a, &[2, 3]).unwrap();
        let m = h * w;
        let ev = tape.value(e).to_vec();
        for (k, plane) in ev.chunks_exact(m).enumerate() {
            if plane.iter().any(|&x| !(x > 0.0 && x <= 2.0)) {
                bad_e += 1;
            }
            // the pixel nearest the mean carries the largest energy
            let x = &data[k * m..(k + 1) * m];
            let mean = x.iter().sum::<f64>() / m as f64;
            let nearest = (0..m).min_by(|&i, &j| (x[i] - mean).abs().total_cmp(&(x[j] - mean).abs())).unwrap();
            let peak = plane.iter().cloned().fold(f64::MIN, f64::max);
            if plane[nearest] < peak - 1e-12 {
                bad_peak += 1;
            }
            if centred && (plane[m / 2] - 2.0).abs() > 1e-12 {
                bad_peak += 1;
            }
        }
        for &v in tape.value(a) {
            min_a = min_a.min(v);
            if !(v >= floor && v < 1.0) {
                bad_a += 1;
            }
        }
        for plane in tape.value(sm).chunks_exact(m) {
            if (plane.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                bad_sum += 1;
            }
        }
    }
    outcome(
        bad_e + bad_peak + bad_a + bad_sum == 0,
        format!(
            "10000 maps: energy out of (0,2] {bad_e}, peak not at mean {bad_peak}, activation out of [sigmoid(0.5),1) {bad_a} (min {min_a:.7}), cross slices off 1 {bad_sum}"
        ),
    )
}

/// Fusion block written out as nested loops for a single sample.
fn ecfm_loops(ff: &[f64], fe: &[f64], weight: &[f64], bias: &[f64], c: usize, m: usize, lambda: f64) -> Vec<f64> {
    let attend = |x: &[f64]| -> Vec<f64> {
        let mut a = vec![0.0; c * m];
        for ch in 0..c {
            let p = &x[ch * m..(ch + 1) * m];
            let mut mean = 0.0;
            for v in p {
                mean += v;
            }
            mean /= m as f64;
            let mut var = 0.0;
            for v in p {
                var += (v - mean) * (v - mean);
            }
            var /= m as f64;
            for n in 0..m {
                let e = 4.0 * (var + lambda) / ((p[n] - mean).powi(2) + 2.0 * var + 2.0 * lambda);
                a[ch * m + n] = 1.0 / (1.0 + (-1.0 / e).exp());
            }
        }
        a
    };
    let (af, ae) = (attend(ff), attend(fe));
    let mut fused = vec![0.0; 2 * c * m];
    for ch in 0..c {
        let mut denom = 0.0;
        for n in 0..m {
            denom += (af[ch * m + n] + ae[ch * m + n]).exp();
        }
        for n in 0..m {
            let i = ch * m + n;
            let cross = (af[i] + ae[i]).exp() / denom;
            fused[i] = cross * ff[i] + af[i] * ff[i];
            fused[c * m + i] = cross * fe[i] + ae[i] * fe[i];
        }
    }
    let out_c = bias.len();
    let mut out = vec![0.0; out_c * m];
    for o in 0..out_c {
        for n in 0..m {
            let mut s = bias[o];
            for k in 0..2 * c {
                s += weight[o * 2 * c + k] * fused[k * m + n];
            }
            out[o * m + n] = s;
        }
    }
    out
}

fn ecfm_reference() -> Outcome {
    let cfg = EnergyConfig::default();
    let mut rng = RngState::new(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let ff = Tensor::randn([1, 2, 3, 3], &mut rng);
        let fe = Tensor::randn([1, 2, 3, 3], &mut rng);
        let w = Tensor::randn([2, 4, 1, 1], &mut rng);
        let b = Tensor::randn([2], &mut rng);
        let want = ecfm_loops(ff.data(), fe.data(), w.data(), b.data(), 2, 9, cfg.lambda);
        let mut tape = Tape::new();
        let (fv, ev) = (tape.constant(ff), tape.constant(fe));
        let params = EcfmParams {
            weight: tape.constant(w),
            bias: tape.constant(b),
        };
        let out = ecfm_forward(&mut tape, fv, ev, &params, &cfg).unwrap();
        for (a, b) in tape.value(out.fused).iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst < 1e-10, format!("100 trials, max abs difference {worst:.2e} (< 1e-10)"))
}

fn event_conservation() -> Outcome {
    let mut rng = RngState::new(5);
    let (mut bad_total, mut bad_window, mut bad_static) = (0, 0, 0);
    for _ in 0..1000 {
        let g = Geometry {
            height: 1 + rng.below(6),
            width: 1 + rng.below(6),
        };
        let duration = 1 + rng.below(200_000) as u64;
        let window = 1 + rng.below(60_000) as u64;
        let count = rng.below(300);
        let mut events: Vec<Event> = (0..count)
            .map(|_| Event {
                t_us: rng.below(duration as usize) as u64,
                x: rng.below(g.width),
                y: rng.below(g.height),
                polarity: if rng.bernoulli(0.5) { 1 } else { -1 },
            })
            .collect();
        events.sort_by_key(|e| e.t_us);
        let stream = EventStream::new(g, events.clone(), duration).unwrap();
        let bins = bin_events(&stream, window).unwrap();
        let total: f64 = bins.iter().map(|b| b.data.data().iter().sum::<f64>()).sum();
        if total != count as f64 {
            bad_total += 1;
        }
        let plane = g.height * g.width;
        let mut expected = vec![vec![0.0; 2 * plane]; bins.len()];
        for e in &events {
            let hits: Vec<usize> = bins
                .iter()
                .enumerate()
                .filter(|(_, b)| {
                    let lo = b.window_us * (b.window_index as u64 - 1);
                    e.t_us >= lo && e.t_us < lo + b.window_us
                })
                .map(|(j, _)| j)
                .collect();
            if hits.len() != 1 {
                bad_window += 1;
                continue;
            }
            let ch = usize::from(e.polarity < 0);
            expected[hits[0]][ch * plane + e.y * g.width + e.x] += 1.0;
        }
        if bins.iter().zip(&expected).any(|(b, want)| b.data.data() != want.as_slice()) {
            bad_total += 1;
        }
        let pixels: Vec<f64> = (0..plane).map(|_| rng.uniform()).collect();
        let img = Image::new(g.height, g.width, pixels).unwrap();
        let t0 = rng.below(1000) as u64;
        if !simulate_events(&img, &img.clone(), 0.2, t0, t0 + duration).unwrap().is_empty() {
            bad_static += 1;
        }
    }
    outcome(
        bad_total + bad_window + bad_static == 0,
        format!("1000 streams: count mismatches {bad_total}, events not in exactly one window {bad_window}, static pairs with events {bad_static}"),
    )
}

fn ablation_config(root: &Path, out: &str) -> RunConfig {
    RunConfig {
        data_dir: root.join("data"),
        out_dir: root.join(out),
        ..RunConfig::default()
    }
}

fn metric_exactness(root: &Path, ablation_csv: Option<&str>) -> Outcome {
    let (r, m) = rmse_mae(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
    let mut ok = (r - (2.0f64 / 3.0).sqrt()).abs() < 1e-12 && (m - 2.0 / 3.0).abs() < 1e-12;
    let cfg = ablation_config(root, "eval");
    let model = build_model(&cfg.model_config(), 17).unwrap();
    let ckpt = root.join("eval_ckpt");
    save_checkpoint(&model, CheckpointMeta { seed: 17, epoch: 0 }, &ckpt).unwrap();
    let (rmse, mae) = cmd_eval(&cfg, &ckpt, &cfg.test_manifest_path()).unwrap();
    let text = fs::read_to_string(cfg.out_dir.join("predictions.csv")).unwrap();
    let mut lines = text.lines();
    ok &= lines.next() == Some("id,y,y_hat,sigma");
    let (mut sq, mut abs, mut n) = (0.0, 0.0, 0.0);
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        sq += (f[1] - f[2]).powi(2);
        abs += (f[1] - f[2]).abs();
        n += 1.0;
    }
    let (hand_rmse, hand_mae) = ((sq / n).sqrt(), abs / n);
    let gap = (hand_rmse - rmse).abs().max((hand_mae - mae).abs());
    ok &= gap < 1e-12 && rmse >= mae;
    let mut runs = 0;
    if let Some(csv) = ablation_csv {
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let (r, m): (f64, f64) = (f[6].parse().unwrap(), f[7].parse().unwrap());
            ok &= r >= m && m >= 0.0;
            runs += 1;
        }
    }
    outcome(
        ok,
        format!("sqrt(2/3) case exact; eval on {n} samples differs from hand computation by {gap:.1e}; RMSE >= MAE on eval and {runs} ablation rows"),
    )
}

fn run(name: &str, budget: Option<Duration>, results: &mut Vec<bool>, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let o = f();
    let elapsed = start.elapsed();
    let in_budget = budget.map_or(true, |b| elapsed <= b);
    let passed = o.passed && in_budget;
    let budget_note = budget.map_or(String::new(), |b| format!(" / budget {}s", b.as_secs()));
    println!(
        "{} {name}: {} [{:.1}s{budget_note}]",
        if passed { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    results.push(passed);
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut results = Vec::new();

    run("1 gradient suite", Some(Duration::from_secs(60)), &mut results, grad_suite);
    run("2 energy-score estimators", Some(Duration::from_secs(120)), &mut results, estimator_grid);
    run("3 energy attention bounds", Some(Duration::from_secs(30)), &mut results, attention_bounds);
    run("4 fusion reference equivalence", None, &mut results, ecfm_reference);
    run("5 event conservation", None, &mut results, event_conservation);

    cmd_gen_data(&ablation_config(root, "first")).unwrap();
    let mut first = None;
    let mut report = None;
    let start = Instant::now();
    match cmd_ablation(&ablation_config(root, "first")) {
        Ok(r) => {
            first = fs::read_to_string(root.join("first").join("ablation.csv")).ok();
            report = Some(r);
        }
        Err(e) => println!("ablation error: {e}"),
    }
    let sweep = start.elapsed();
    let budget = Duration::from_secs(15 * 60);
    let summary = |report: &ecfm::harness::AblationReport, group| {
        report
            .results
            .iter()
            .filter(|r| r.variant.group == group)
            .map(|r| format!("{} {:.4}", r.variant.name, r.mean_rmse))
            .collect::<Vec<_>>()
            .join(", ")
    };
    run("6 fusion ablation ordering", None, &mut results, || match &report {
        Some(r) => outcome(
            r.fusion_ordering_holds() && sweep <= budget,
            format!(
                "{} (sweep {:.0}s / budget {}s)",
                summary(r, ecfm::harness::Group::Fusion),
                sweep.as_secs_f64(),
                budget.as_secs()
            ),
        ),
        None => outcome(false, "sweep failed"),
    });
    run("7 decoder ablation ordering", None, &mut results, || match &report {
        Some(r) => outcome(r.decoder_best_holds(), summary(r, ecfm::harness::Group::Decoder)),
        None => outcome(false, "sweep failed"),
    });
    run("8 metric exactness", None, &mut results, || metric_exactness(root, first.as_deref()));
    run("9 ablation determinism", None, &mut results, || {
        let again = cmd_ablation(&ablation_config(root, "second"))
            .ok()
            .and_then(|_| fs::read_to_string(root.join("second").join("ablation.csv")).ok());
        match (&first, again) {
            (Some(a), Some(b)) => outcome(a == &b, format!("{} bytes, identical: {}", a.len(), a == &b)),
            _ => outcome(false, "sweep failed"),
        }
    });

    let passed = results.iter().filter(|p| **p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
