//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Set `ZSL_ACCEPTANCE_SKIP_E2E=1` to skip the end-to-end training matrix.
//! Failing criteria are reported but only fail the process (exit 3) when
//! `ZSL_ACCEPTANCE_STRICT=1` is set.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use zsl_cli::{cmd_eval, cmd_synth, cmd_train, resolve, Ablation, Overrides, TRAIN_LOG};
use zsl_core::attention::{compactness_loss, diversity_loss};
use zsl_core::cropping::{boxcar_mask, CropParams};
use zsl_core::embedding::{class_center_triplet_loss, embedding_softmax_loss, NegativeMode};
use zsl_core::gradcheck::{run_suite, SuiteOptions};
use zsl_core::inference::solve_ridge;
use zsl_core::evaluate::EvalMode;
use zsl_core::metrics::{harmonic_mean, EvalReport};
use zsl_core::model::LossMode;
use zsl_tensor::{seeded_rng, Graph, Tensor};

struct Tally {
    failed: Vec<String>,
    total: usize,
}

impl Tally {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        self.total += 1;
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(name.to_string());
        }
    }
}

fn gradient_suite(t: &mut Tally) {
    let start = Instant::now();
    let report = run_suite(SuiteOptions::default()).expect("suite runs");
    let elapsed = start.elapsed();
    let worst = report.checks.iter().max_by(|a, b| {
        (a.max_rel_error / a.tolerance).partial_cmp(&(b.max_rel_error / b.tolerance)).unwrap()
    });
    let worst = worst.map(|c| format!("{} {:.2e}/{:.0e}", c.name, c.max_rel_error, c.tolerance));
    let failing: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    t.check(
        "gradient suite",
        report.passed() && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, worst {}, failing {failing:?}, {:.1}s (limit 120s)",
            report.checks.len(),
            worst.unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    );
}

fn loss_oracles(t: &mut Tally) {
    let mut g = Graph::new();

    let k = 7;
    let s = g.constant(Tensor::zeros(&[3, k])).unwrap();
    let l = embedding_softmax_loss(&mut g, s, &[0, 3, 6]).unwrap();
    let cls = g.value(l).item();
    let err = (cls - (k as f64).ln()).abs();
    t.check("softmax loss at uniform logits", err <= 1e-9, format!("{cls} vs ln {k}, |diff| {err:.1e} (tol 1e-9)"));

    let target = Tensor::new(&[3, 3], vec![0.1, 0.4, 0.2, 0.5, 1.0, 0.6, 0.3, 0.2, 0.1]).unwrap();
    let m = g.constant(target.clone()).unwrap();
    let l = compactness_loss(&mut g, m, &target).unwrap();
    let cpt = g.value(l).item();
    t.check("compactness loss at target", cpt == 0.0, format!("{cpt}"));

    let a = g.constant(Tensor::full(&[5, 5], 1.0)).unwrap();
    let b = g.constant(Tensor::full(&[5, 5], 1.0)).unwrap();
    let l = diversity_loss(&mut g, &[a, b], 0, 0.2).unwrap();
    let div = g.value(l).item();
    let want = 0.8 * 25.0;
    t.check(
        "diversity loss on all-ones maps",
        (div - want).abs() <= 1e-12 * want,
        format!("{div} vs {want} (one-ulp rounding allowed)"),
    );

    let centers = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let phi = Tensor::new(&[3, 3], vec![3.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 2.0]).unwrap();
    let (p, c) = (g.constant(phi).unwrap(), g.constant(centers).unwrap());
    let l = class_center_triplet_loss(&mut g, p, c, &[0, 1, 2], 0.8, NegativeMode::Hardest).unwrap();
    let cct = g.value(l).item() + 0.0;
    t.check("triplet loss with satisfied margin", cct == 0.0, format!("{cct}"));
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

/// Gradient descent on the ridge objective until steps vanish.
fn ridge_by_descent(unseen: &Tensor, seen: &Tensor, lambda: f64) -> Vec<f64> {
    let (u, s, d) = (unseen.shape()[0], seen.shape()[0], seen.shape()[1]);
    let st: Vec<f64> = (0..d * s).map(|i| seen.data()[(i % s) * d + i / s]).collect();
    let gram = matmul(seen.data(), &st, s, d, s);
    let bound = (0..s).map(|i| (0..s).map(|j| gram[i * s + j].abs()).sum::<f64>()).fold(0.0, f64::max);
    let step = 1.0 / (2.0 * (bound + lambda));
    let mut w = vec![0.0; u * s];
    for _ in 0..200_000 {
        let recon = matmul(&w, seen.data(), u, s, d);
        let resid: Vec<f64> = recon.iter().zip(unseen.data()).map(|(a, b)| a - b).collect();
        let grad = matmul(&resid, &st, u, d, s);
        let mut change = 0.0f64;
        for i in 0..u * s {
            let delta = step * (2.0 * grad[i] + 2.0 * lambda * w[i]);
            w[i] -= delta;
            change = change.max(delta.abs());
        }
        if change < 1e-14 {
            break;
        }
    }
    w
}

fn ridge_oracle(t: &mut Tally) {
    let start = Instant::now();
    let mut rng = seeded_rng(100);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let (u, s, d) = (2 + trial % 4, 3 + trial % 5, 8 + trial % 6);
        let seen = Tensor::randn(&[s, d], 1.0, &mut rng);
        let unseen = Tensor::randn(&[u, d], 1.0, &mut rng);
        let lambda = [0.05, 0.5, 5.0, 50.0][trial % 4];
        let w = solve_ridge(&unseen, &seen, lambda).unwrap();
        let oracle = ridge_by_descent(&unseen, &seen, lambda);
        worst = w.data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    let seen = Tensor::randn(&[5, 11], 1.0, &mut rng);
    let w = solve_ridge(&seen, &seen, 1e-10).unwrap();
    let ident = (0..25)
        .map(|i| (w.data()[i] - f64::from(u8::from(i / 5 == i % 5))).abs())
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    t.check(
        "ridge vs iterative minimizer",
        worst <= 1e-6 && ident <= 1e-6 && elapsed < Duration::from_secs(30),
        format!(
            "max |diff| {worst:.1e} over 20 instances, identity error {ident:.1e} (tol 1e-6), {:.1}s (limit 30s)",
            elapsed.as_secs_f64()
        ),
    );
}

fn harmonic(t: &mut Tally) {
    let h = harmonic_mean(36.7, 71.3);
    t.check("harmonic mean calibration", (h - 48.5).abs() <= 0.05, format!("H(36.7, 71.3) = {h:.4}, want 48.5 +- 0.05"));
}

fn boxcar(t: &mut Tally) {
    let p = CropParams::new(15.3, 12.8, 9.4);
    let n = 32;
    let gaps: Vec<f64> = [10.0, 100.0, 1000.0]
        .iter()
        .map(|&k| {
            let mask = boxcar_mask(p, k, n, n).unwrap();
            let (lx, hx) = (p.t_x - p.t_s / 2.0, p.t_x + p.t_s / 2.0);
            let (ly, hy) = (p.t_y - p.t_s / 2.0, p.t_y + p.t_s / 2.0);
            let near = |v: f64, lo: f64, hi: f64| (v - lo).abs() <= 2.0 || (v - hi).abs() <= 2.0;
            let mut worst = 0.0f64;
            for r in 0..n {
                for c in 0..n {
                    let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                    if near(x, lx, hx) || near(y, ly, hy) {
                        continue;
                    }
                    let hard = f64::from(u8::from(x > lx && x < hx && y > ly && y < hy));
                    worst = worst.max((mask.values.data()[r * n + c] - hard).abs());
                }
            }
            worst
        })
        .collect();
    // the gap underflows to exactly zero at large k
    let ok = gaps[1] < gaps[0] && gaps[2] <= gaps[1] && gaps[2] < 1e-3;
    t.check("boxcar convergence", ok, format!("gaps at k=10,100,1000: {:.2e} {:.2e} {:.2e}", gaps[0], gaps[1], gaps[2]));
}

struct RunResult {
    mca: f64,
    detection: Option<(f64, f64)>,
    log: String,
    reports: String,
    secs: f64,
}

fn run(seed: u64, ablation: Option<Ablation>, dir: &Path) -> RunResult {
    let start = Instant::now();
    let overrides = Overrides {
        seed: Some(seed),
        ablations: ablation.into_iter().collect(),
        ..Default::default()
    };
    let cfg = resolve(None, &overrides).unwrap();
    let ds = cmd_synth(&cfg, &dir.join("data")).unwrap();
    let model = cmd_train(&cfg, &ds, &dir.join("run")).unwrap();
    let zsl = cmd_eval(&cfg, &model, &ds, EvalMode::Zsl).unwrap();
    let mut reports: Vec<EvalReport> = zsl.clone();
    let detection = if model.config.num_parts() > 0 {
        let d = cmd_eval(&cfg, &model, &ds, EvalMode::Detect).unwrap();
        let r = d[0].detection.clone().unwrap();
        reports.extend(d);
        Some((r.model.average, r.random.average))
    } else {
        None
    };
    RunResult {
        mca: zsl[0].mca_unseen.unwrap(),
        detection,
        log: fs::read_to_string(dir.join("run").join(TRAIN_LOG)).unwrap(),
        reports: serde_json::to_string(&reports).unwrap(),
        secs: start.elapsed().as_secs_f64(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn end_to_end(t: &mut Tally) {
    let configs: [(&str, Option<Ablation>); 5] = [
        ("default", None),
        ("no-ma-loss", Some(Ablation::NoMaLoss)),
        ("baseline", Some(Ablation::NoParts)),
        ("random-parts", Some(Ablation::RandomParts)),
        ("loss=softmax", Some(Ablation::Loss(LossMode::Softmax))),
    ];
    let seeds = [0u64, 1, 2];
    let mut results: Vec<Vec<RunResult>> = Vec::new();
    for (name, ablation) in &configs {
        let mut row = Vec::new();
        for &seed in &seeds {
            let dir = tempfile::tempdir().unwrap();
            let r = run(seed, *ablation, dir.path());
            println!(
                "  {name:<13} seed {seed}: unseen MCA {:6.2}, detection {}, {:.0}s",
                r.mca,
                r.detection.map_or("-".to_string(), |(m, rnd)| format!("{m:.2} (random {rnd:.2})")),
                r.secs
            );
            row.push(r);
        }
        results.push(row);
    }
    let mca = |i: usize| median(results[i].iter().map(|r| r.mca).collect());
    let det = |i: usize| median(results[i].iter().map(|r| r.detection.unwrap().0).collect());

    let base = &results[0][0];
    t.check(
        "e2e (a) unseen MCA seed 0",
        base.mca >= 60.0,
        format!("{:.2} (need >= 60, chance 20)", base.mca),
    );
    let (d, rnd) = base.detection.unwrap();
    t.check(
        "e2e (b) detection over random seed 0",
        d >= rnd + 20.0,
        format!("{d:.2} vs random {rnd:.2} (need margin >= 20)"),
    );
    t.check(
        "e2e runtime seed 0",
        base.secs < 1800.0,
        format!("{:.0}s on 1 core (limit 1800s)", base.secs),
    );
    let (dd, dn) = (det(0), det(1));
    t.check(
        "e2e (c) no-ma-loss detection drop",
        dd - dn >= 5.0,
        format!("median {dd:.2} vs {dn:.2} (need drop >= 5)"),
    );
    let (full, baseline, random) = (mca(0), mca(2), mca(3));
    t.check(
        "e2e (d) baseline+parts >= baseline >= random-parts",
        full >= baseline && baseline >= random,
        format!("median MCA {full:.2} >= {baseline:.2} >= {random:.2}"),
    );
    let softmax = mca(4);
    t.check(
        "e2e (e) combined >= softmax",
        full >= softmax,
        format!("median MCA {full:.2} vs {softmax:.2}"),
    );

    let dir = tempfile::tempdir().unwrap();
    let again = run(0, None, dir.path());
    t.check(
        "determinism synth+train+eval",
        again.log == base.log && again.reports == base.reports,
        format!("seed 0 rerun: log equal {}, reports equal {}", again.log == base.log, again.reports == base.reports),
    );
}

fn main() {
    let mut t = Tally {
        failed: Vec::new(),
        total: 0,
    };
    gradient_suite(&mut t);
    loss_oracles(&mut t);
    ridge_oracle(&mut t);
    harmonic(&mut t);
    boxcar(&mut t);
    if std::env::var_os("ZSL_ACCEPTANCE_SKIP_E2E").is_some() {
        println!("SKIP end-to-end matrix");
    } else {
        end_to_end(&mut t);
    }
    println!("{}/{} criteria passed", t.total - t.failed.len(), t.total);
    if !t.failed.is_empty() {
        println!("failing: {:?}", t.failed);
        if std::env::var_os("ZSL_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(3);
        }
    }
}
