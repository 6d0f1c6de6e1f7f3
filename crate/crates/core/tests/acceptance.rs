//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! The toy criteria train the full four-regime study from
//! `configs/toy.toml` (about a quarter of an hour on one core). Outputs are
//! kept under cargo's test tmpdir for inspection.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use halo_core::attacks::{pgd, AttackConfig, AttackInit, AttackObjective, BoxBounds};
use halo_core::experiments::{run_toy_figure, toy_checks, CheckOutcome, ExperimentConfig, RunManifest};
use halo_core::metrics::{aupr, auroc, fpr95, AttackSetting, ScorePair};
use halo_core::objectives::{
    find_adversaries, loss_and_gradients, loss_halo, loss_oe, loss_trades, loss_with_adversaries, Batch, HaloConfig,
    OeDivergence,
};
use halo_core::{Graph, Mlp, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

// ---- toy study (criteria 1–3) ----

struct Toy {
    checks: Vec<CheckOutcome>,
}

static TOY: OnceLock<Toy> = OnceLock::new();

fn toy() -> &'static Toy {
    TOY.get_or_init(|| {
        let cfg = ExperimentConfig::load(&workspace_root().join("configs/toy.toml")).unwrap();
        let out = scratch("toy_figure");
        let res = run_toy_figure(&cfg, &out).unwrap();
        Toy {
            checks: toy_checks(&res, &out),
        }
    })
}

fn toy_check(name: &str) -> &'static CheckOutcome {
    toy().checks.iter().find(|c| c.name == name).expect("check exists")
}

fn criterion_1() -> Verdict {
    let c = toy_check("regime d robust");
    verdict(c.passed, c.detail.clone())
}

fn criterion_2() -> Verdict {
    let b = toy_check("regime b asymmetry");
    let c = toy_check("regime c asymmetry");
    verdict(b.passed && c.passed, format!("b: {}; c: {}", b.detail, c.detail))
}

fn criterion_3() -> Verdict {
    let c = toy_check("regime a vulnerability");
    verdict(c.passed, c.detail.clone())
}

// ---- entropy identity ----

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=8);
        let k = rng.gen_range(2..=10);
        let scale = [0.1, 3.0, 30.0, 300.0][rng.gen_range(0..4)];
        let z = random_tensor(&mut rng, n, k, scale);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let kl = g.kl_to_uniform(zv).unwrap();
        let h = g.shannon_entropy(zv).unwrap();
        let mean_h = g.value(h).data().iter().sum::<f64>() / n as f64;
        worst = worst.max((g.value(kl).item() + mean_h - (k as f64).ln()).abs());
    }
    verdict(worst <= 1e-10, format!("max |KL(p‖U) + H̄ − ln K| = {worst:.2e} over 10⁴ batches"))
}

// ---- metric oracles ----

fn pairwise_auroc(sp: &ScorePair) -> f64 {
    let mut wins = 0.0;
    for &o in &sp.ood_scores {
        for &i in &sp.id_scores {
            if o > i {
                wins += 1.0;
            } else if o == i {
                wins += 0.5;
            }
        }
    }
    wins / (sp.ood_scores.len() as f64 * sp.id_scores.len() as f64)
}

fn count_at_least(scores: &[f64], t: f64) -> usize {
    scores.iter().filter(|&&s| s >= t).count()
}

fn distinct_desc(sp: &ScorePair) -> Vec<f64> {
    let mut t: Vec<f64> = sp.id_scores.iter().chain(&sp.ood_scores).copied().collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn scan_fpr95(sp: &ScorePair) -> f64 {
    let (n_ood, n_id) = (sp.ood_scores.len() as f64, sp.id_scores.len() as f64);
    distinct_desc(sp)
        .into_iter()
        .filter(|&t| count_at_least(&sp.ood_scores, t) as f64 / n_ood >= 0.95)
        .map(|t| count_at_least(&sp.id_scores, t) as f64 / n_id)
        .fold(f64::INFINITY, f64::min)
}

fn scan_aupr(sp: &ScorePair) -> f64 {
    let n_ood = sp.ood_scores.len() as f64;
    let (mut area, mut prev) = (0.0, 0.0);
    for t in distinct_desc(sp) {
        let tp = count_at_least(&sp.ood_scores, t);
        let fp = count_at_least(&sp.id_scores, t);
        let recall = tp as f64 / n_ood;
        area += (recall - prev) * (tp as f64 / (tp + fp) as f64);
        prev = recall;
    }
    area
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = Vec::new();
    for case in 0..1000 {
        let n_id = rng.gen_range(1..=50);
        let n_ood = rng.gen_range(1..=50);
        // half the cases draw from a small lattice to force ties
        let tied = case % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| {
            if tied {
                rng.gen_range(0..8) as f64 * 0.5
            } else {
                rng.gen_range(-3.0..3.0)
            }
        };
        let id: Vec<f64> = (0..n_id).map(|_| draw(&mut rng)).collect();
        let ood: Vec<f64> = (0..n_ood).map(|_| draw(&mut rng) + 0.5).collect();
        let sp = ScorePair::new(id, ood, AttackSetting::Clean);
        let checks = [
            ("auroc", auroc(&sp).unwrap(), pairwise_auroc(&sp)),
            ("fpr95", fpr95(&sp).unwrap(), scan_fpr95(&sp)),
            ("aupr", aupr(&sp).unwrap(), scan_aupr(&sp)),
        ];
        for (name, got, want) in checks {
            if got != want {
                mismatches.push(format!("case {case} {name}: {got} vs {want}"));
            }
        }
    }
    verdict(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "AUROC, FPR95 and AUPR bit-equal to brute-force oracles on 1000 score pairs".to_string()
        } else {
            format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
        },
    )
}

// ---- composite gradients ----

fn perturbed(m: &Mlp, layer: usize, bias: bool, idx: usize, h: f64) -> Mlp {
    let mut w = m.weights().to_vec();
    let mut b = m.biases().to_vec();
    let t = if bias { &mut b[layer] } else { &mut w[layer] };
    t.data_mut()[idx] += h;
    Mlp::from_parts(m.layer_sizes(), w, b).unwrap()
}

// Zero biases put a layer exactly on the ReLU kink whenever the previous
// layer is fully inactive, where central differences are meaningless.
fn with_random_biases(m: Mlp, rng: &mut ChaCha8Rng) -> Mlp {
    let biases = m
        .biases()
        .iter()
        .map(|b| random_tensor(rng, 1, b.len(), 0.5).reshape(b.shape().to_vec()).unwrap())
        .collect();
    Mlp::from_parts(m.layer_sizes(), m.weights().to_vec(), biases).unwrap()
}

fn criterion_6() -> Verdict {
    let configs: Vec<(&str, HaloConfig)> = vec![
        ("oe", HaloConfig::oe(0.8)),
        ("sat", HaloConfig::sat()),
        ("trades", HaloConfig::trades(2.0)),
        ("hat", HaloConfig::hat(2.0, 0.5)),
        ("halo", HaloConfig::default()),
        (
            "halo (forward OE KL)",
            HaloConfig {
                oe_divergence: OeDivergence::Forward,
                ..HaloConfig::default()
            },
        ),
        (
            "halo + hat-oe",
            HaloConfig {
                hat_oe_enabled: true,
                ..HaloConfig::default()
            },
        ),
    ];
    let attack = AttackConfig::training(0.3, 3);
    let h = 1e-5;
    let mut worst: (f64, &str) = (0.0, "");
    for model_seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(60 + model_seed);
        let m = with_random_biases(Mlp::init(&[3, 7, 5, 3], 100 + model_seed).unwrap(), &mut rng);
        let helper = with_random_biases(Mlp::init(&[3, 7, 5, 3], 200 + model_seed).unwrap(), &mut rng);
        let id = random_tensor(&mut rng, 6, 3, 2.0);
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let oe = random_tensor(&mut rng, 5, 3, 2.0);
        let batch = Batch::new(&id, &labels, Some(&oe));
        for (name, cfg) in &configs {
            let adv = find_adversaries(&m, Some(&helper), &batch, cfg, &attack, &mut rng).unwrap();
            let (_, grads) = loss_and_gradients(&m, &batch, cfg, &adv).unwrap();
            for layer in 0..m.weights().len() {
                for bias in [false, true] {
                    let n = if bias { m.biases()[layer].len() } else { m.weights()[layer].len() };
                    for idx in 0..n {
                        let lp = loss_with_adversaries(&perturbed(&m, layer, bias, idx, h), &batch, cfg, &adv).unwrap();
                        let lm = loss_with_adversaries(&perturbed(&m, layer, bias, idx, -h), &batch, cfg, &adv).unwrap();
                        let fd = (lp.total - lm.total) / (2.0 * h);
                        let an = if bias { grads.biases[layer].data()[idx] } else { grads.weights[layer].data()[idx] };
                        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                        if rel > worst.0 {
                            worst = (rel, name);
                        }
                    }
                }
            }
        }
    }
    verdict(
        worst.0 < 1e-4,
        format!("{} losses × 3 models, worst relative error {:.2e} ({})", configs.len(), worst.0, worst.1),
    )
}

// ---- attack constraints ----

fn criterion_7() -> Verdict {
    let objectives = [
        AttackObjective::CeMax,
        AttackObjective::KlMax,
        AttackObjective::EntropyMax,
        AttackObjective::EntropyMin,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0usize;
    for case in 0..1000 {
        let d = rng.gen_range(1..=4);
        let k = rng.gen_range(2..=4);
        let m = Mlp::init(&[d, 6, k], case).unwrap();
        let n = rng.gen_range(1..=6);
        let lo: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..0.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.gen_range(0.0..4.0)).collect();
        let x = Tensor::matrix(
            n,
            d,
            (0..n * d).map(|i| rng.gen_range(lo[i % d]..=hi[i % d])).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let eps = if case % 10 == 0 { 0.0 } else { rng.gen_range(0.0..2.0) };
        let cfg = AttackConfig {
            epsilon: eps,
            steps: rng.gen_range(0..=8),
            step_size: rng.gen_range(0.01..1.5),
            bounds: Some(BoxBounds { lo: lo.clone(), hi: hi.clone() }),
            init: if rng.gen_bool(0.5) { AttackInit::RandomUniform } else { AttackInit::Zero },
            objective: objectives[case as usize % 4],
            track_best: rng.gen_bool(0.3),
        };
        let res = pgd(&m, &x, Some(&labels), &cfg, &mut rng).unwrap();
        for (i, (&a, &c)) in res.adversarial.data().iter().zip(x.data()).enumerate() {
            let j = i % d;
            if (a - c).abs() > eps || a < lo[j] || a > hi[j] || res.perturbation.data()[i].abs() > eps {
                violations += 1;
            }
        }
    }

    // ε = 0 with zero init returns the input bit for bit
    let m = Mlp::init(&[2, 8, 2], 1).unwrap();
    let x = random_tensor(&mut rng, 16, 2, 5.0);
    let mut identical = true;
    for objective in objectives {
        let cfg = AttackConfig {
            epsilon: 0.0,
            steps: 5,
            step_size: 0.7,
            bounds: None,
            init: AttackInit::Zero,
            objective,
            track_best: false,
        };
        let res = pgd(&m, &x, Some(&[0; 16]), &cfg, &mut rng).unwrap();
        identical &= res
            .adversarial
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    verdict(
        violations == 0 && identical,
        format!("{violations} budget/box violations over 1000 attacks; ε=0 identity bitwise: {identical}"),
    )
}

// ---- reduction lattice ----

fn criterion_8() -> Verdict {
    let attack = AttackConfig::training(0.5, 5);
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let m = Mlp::init(&[2, 10, 10, 2], seed).unwrap();
        let id = random_tensor(&mut rng, 12, 2, 4.0);
        let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let oe = random_tensor(&mut rng, 9, 2, 6.0);
        let beta = rng.gen_range(0.1..4.0);
        let eta = rng.gen_range(0.1..3.0);

        let halo = HaloConfig {
            eta: 0.0,
            gamma: 0.0,
            beta1: beta,
            beta2: beta,
            ..HaloConfig::default()
        };
        let a = loss_halo(&m, None, &id, &labels, &oe, &halo, &attack, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = loss_trades(&m, &id, &labels, &attack, beta, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        worst = worst.max((a.total - b.total).abs());

        let halo = HaloConfig {
            eta,
            gamma: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            ..HaloConfig::default()
        };
        let a = loss_halo(&m, None, &id, &labels, &oe, &halo, &attack, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = loss_oe(&m, &id, &labels, &oe, eta).unwrap();
        worst = worst.max((a.total - b.total).abs());
    }
    verdict(worst <= 1e-10, format!("max |HALO − reduced| = {worst:.2e} over 20 matched batches"))
}

// ---- determinism ----

fn criterion_9() -> Verdict {
    let cfg = workspace_root().join("configs/toy.toml");
    let run = |name: &str| -> (PathBuf, RunManifest) {
        let out = scratch(name);
        let o = Command::new(env!("CARGO_BIN_EXE_halo-lab"))
            .args(["toy-figure", "--config"])
            .arg(&cfg)
            .arg("--out-dir")
            .arg(&out)
            .args(["--set", "epochs=15", "--set", "data.n_per_region=200", "--set", "n_test=200"])
            .args(["--set", "maps.resolution=20", "--set", "seeds=[0, 1]"])
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let manifest = RunManifest::read(&out.join("manifest.json")).unwrap();
        (out, manifest)
    };
    let (a, ma) = run("determinism_a");
    let (b, mb) = run("determinism_b");
    let mut differing = Vec::new();
    for f in &ma.metrics {
        if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).ok().unwrap_or_default() {
            differing.push(f.clone());
        }
    }
    let same_list = ma.metrics == mb.metrics;
    verdict(
        same_list && differing.is_empty() && !ma.metrics.is_empty(),
        format!("{} metric files compared, {} differ {differing:?}", ma.metrics.len(), differing.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(u8, &str, fn() -> Verdict); 9] = [
        (4, "KL-to-uniform / entropy identity", criterion_4),
        (5, "metric oracles", criterion_5),
        (6, "composite loss gradients", criterion_6),
        (7, "attack constraint fuzzing", criterion_7),
        (8, "reduction lattice", criterion_8),
        (1, "toy regime (d) robustness", criterion_1),
        (2, "toy regime (b)/(c) asymmetry", criterion_2),
        (3, "toy regime (a) vulnerability", criterion_3),
        (9, "toy-figure determinism", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (num, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str()) || num.to_string() == *p) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!v.passed);
        println!(
            "criterion {num} [{}] {name} ({:.1}s): {}",
            if v.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
        std::io::stdout().flush().unwrap();
    }
    if let Some(t) = TOY.get() {
        for c in t.checks.iter().filter(|c| c.name.starts_with("ordering") || c.name == "manifest complete") {
            println!("  invariant [{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
