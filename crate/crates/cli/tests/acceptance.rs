//! End-to-end acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test -p loract-cli --test acceptance -- --nocapture` to see
//! the per-criterion lines. The test fails if any criterion fails.

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use clap::Parser;
use loract::autodiff::{op_suite, OP_STEP, OP_TOLERANCE};
use loract::compress::{kept_ratio, singular_spectrum, CompressionPolicy};
use loract::decompose::{approx_error, random_projection, rsvd, sampled_ortho, truncated_svd, Norm};
use loract::linalg::{gaussian_matrix, Precision, SeededRng};
use loract::synth;
use loract::transformer::{
    build_model, build_task, compute_gradients, grad_error, train_loop, unit_backward_error, window_means, ModelConfig,
    Strategy, TaskConfig, TrainConfig,
};
use loract_cli::{run, Cli, Outcome};
use serde_json::Value;

type Verdict = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Verdict + 'a>);

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cli(dir: &Path, args: &[&str]) -> Result<Outcome, String> {
    let mut argv = vec!["loract", "--out", dir.to_str().unwrap()];
    argv.extend_from_slice(args);
    let parsed = Cli::try_parse_from(&argv).map_err(|e| e.to_string())?;
    run(&parsed).map_err(|e| e.to_string())
}

fn failed_checks(out: &Outcome) -> Vec<String> {
    out.report.checks.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect()
}

fn le_slack(a: f64, b: f64, scale: f64) -> bool {
    a <= b * (1.0 + 1e-10) + 1e-12 * scale
}

const SIZES: [usize; 6] = [16, 32, 64, 128, 256, 512];

fn decomposition_optimality() -> Verdict {
    let start = Instant::now();
    let root = SeededRng::new(2024).child("optimality");
    let mut violations = Vec::new();
    let mut largest = (0, 0);
    for i in 0..200u64 {
        let mut rng = root.child_indexed("matrix", i);
        let (m, n) = if i == 0 { (512, 512) } else { (SIZES[rng.below(6)], SIZES[rng.below(6)]) };
        largest = largest.max((m, n));
        let p = m.min(n);
        let a = if i % 2 == 0 {
            gaussian_matrix(&mut rng, m, n)
        } else {
            let sigma: Vec<f64> = (0..p).map(|j| 0.9f64.powi(j as i32)).collect();
            synth::with_spectrum(&mut rng, m, n, &sigma).map_err(|e| e.to_string())?
        };
        let k = 1 + rng.below(p / 4);
        let best = truncated_svd(&a, k).map_err(|e| e.to_string())?;
        let others = [
            ("rsvd", rsvd(&a, k, k, 1, &mut rng.child("rsvd"))),
            ("sampled", sampled_ortho(&a, k, k, 1, &mut rng.child("sampled"))),
            ("randproj", random_projection(&a, k, &mut rng.child("randproj"))),
        ];
        let scale = a.frobenius_norm();
        for norm in [Norm::Spectral, Norm::Frobenius] {
            let floor = approx_error(&a, &best, norm).map_err(|e| e.to_string())?;
            for (name, f) in &others {
                let f = f.as_ref().map_err(|e| e.to_string())?;
                let err = approx_error(&a, f, norm).map_err(|e| e.to_string())?;
                if !le_slack(floor, err, scale) {
                    violations.push(format!("#{i} {m}x{n} k={k} {name} {norm:?}: tsvd {floor} > {err}"));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let detail = format!("200 matrices up to {}x{}, {} violations, {:.1}s", largest.0, largest.1, violations.len(), elapsed.as_secs_f64());
    ensure(violations.is_empty() && elapsed < Duration::from_secs(120), format!("{detail} {violations:?}"))
}

fn exact_rank_recovery() -> Verdict {
    let root = SeededRng::new(7).child("exact-rank");
    let (m, n, k) = (128, 64, 8);
    let mut ok = 0;
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = root.child_indexed("seed", seed);
        let a = synth::exact_rank(&mut rng, m, n, k).map_err(|e| e.to_string())?;
        let f = sampled_ortho(&a, k, k, 1, &mut rng.child("alg")).map_err(|e| e.to_string())?;
        let rel = approx_error(&a, &f, Norm::Spectral).map_err(|e| e.to_string())?
            / loract::linalg::spectral_norm(&a).map_err(|e| e.to_string())?;
        worst = worst.max(rel);
        ok += usize::from(rel <= 1e-6);
    }
    ensure(ok >= 99, format!("{ok}/100 seeds within 1e-6, worst relative error {worst:e}"))
}

fn range_finder_bound(dir: &Path) -> Verdict {
    let start = Instant::now();
    let out = cli(dir, &["bounds", "--theorem", "3.3", "--trials", "1000"])?;
    let elapsed = start.elapsed();
    let table = out.report.table("bounds").ok_or("no bounds table")?;
    let status = table.column("status").ok_or("no status column")?;
    let checked = status.iter().filter(|s| s.to_string() == "checked").count();
    let held = table.column("holds").unwrap().iter().zip(&status).filter(|(h, s)| h.to_string() == "true" && s.to_string() == "checked").count();
    ensure(
        checked == 1000 && held == 1000 && elapsed < Duration::from_secs(60),
        format!("{held}/{checked} valid instances hold, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn projection_floor(dir: &Path) -> Verdict {
    let out = cli(dir, &["bounds", "--theorem", "3.2", "--trials", "500"])?;
    let table = out.report.table("bounds").ok_or("no bounds table")?;
    let trials = table.column("trials").unwrap();
    let all_trials = trials.iter().all(|t| t.to_string().parse::<usize>().is_ok_and(|t| t >= 500));
    let failed = failed_checks(&out);
    ensure(
        failed.is_empty() && all_trials && !table.rows.is_empty(),
        format!("{} grid cells, 500 trials each {failed:?}", table.rows.len()),
    )
}

fn accumulation_bound(dir: &Path) -> Verdict {
    let out = cli(dir, &["bounds", "--theorem", "3.1", "--trials", "200"])?;
    let table = out.report.table("bounds").ok_or("no bounds table")?;
    let held = table.column("holds").unwrap().iter().filter(|h| h.to_string() == "true").count();
    let failed = failed_checks(&out);
    ensure(
        failed.is_empty() && held == 200 && table.rows.len() == 200,
        format!("{held}/{} chains hold, forward bit-identical on all {failed:?}", table.rows.len()),
    )
}

fn gradient_fidelity(dir: &Path) -> Verdict {
    let ops = op_suite(11, OP_STEP).map_err(|e| e.to_string())?;
    let worst = ops.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let bad: Vec<_> = ops.iter().filter(|c| c.max_rel_err > OP_TOLERANCE).map(|c| c.name.clone()).collect();
    let out = cli(dir, &["gradcheck"])?;
    let lossless = out.report.checks.iter().find(|c| c.name == "lossless ratio 1").ok_or("no lossless check")?;
    let failed = failed_checks(&out);
    ensure(
        bad.is_empty() && failed.is_empty() && out.config.model.depth == 2,
        format!("{} ops, worst rel err {worst:e}; lossless r=1 rel err {} {bad:?} {failed:?}", ops.len(), lossless.detail),
    )
}

fn prenorm_backward_exact() -> Verdict {
    let root = SeededRng::new(5).child("prenorm");
    let mut worst = 0.0f64;
    let mut units = 0;
    for i in 0..100u64 {
        let mut rng = root.child_indexed("instance", i);
        let config = ModelConfig {
            depth: 1,
            width: 8 * (1 + rng.below(3)),
            heads: 2,
            ffn_hidden: 12 + rng.below(20),
            lora_rank: 4,
            eps: 0.0,
            up_init: 0.1,
            ..ModelConfig::default()
        };
        let mut model = build_model(&config, &mut rng).map_err(|e| e.to_string())?;
        for layer in &mut model.layers {
            for unit in [&mut layer.attn, &mut layer.ffn] {
                unit.gamma = gaussian_matrix(&mut rng, 1, config.width).map(|g| 1.0 + 0.3 * g);
            }
        }
        let seq_len = 2 + rng.below(6);
        let rows = seq_len * (1 + rng.below(4));
        let x = gaussian_matrix(&mut rng, rows, config.width);
        for unit in model.units() {
            let gz = gaussian_matrix(&mut rng, rows, config.width);
            let err = unit_backward_error(unit, &x, &gz, seq_len, false).map_err(|e| e.to_string())?;
            worst = worst.max(err);
            units += 1;
        }
    }
    ensure(worst <= 1e-8, format!("100 instances ({units} units), worst relative error {worst:e}"))
}

fn prenorm_beats_layerwise() -> Verdict {
    let ratios = [0.5, 0.25, 0.125];
    let mut sums = [[0.0f64; 2]; 3];
    let seeds = 50;
    for seed in 0..seeds {
        let root = SeededRng::new(seed).child("strategies");
        let model = build_model(&ModelConfig::default(), &mut root.child("model")).map_err(|e| e.to_string())?;
        let (batch, _) = build_task(&model, &TaskConfig::default(), &mut root.child("task")).map_err(|e| e.to_string())?;
        let step = root.child("step");
        let exact = compute_gradients(&model, &batch, &CompressionPolicy::exact(), Strategy::PreNorm, &step)
            .map_err(|e| e.to_string())?;
        for (i, &r) in ratios.iter().enumerate() {
            let policy = CompressionPolicy { ratio: r, ..CompressionPolicy::default() };
            for (j, strategy) in [Strategy::PreNorm, Strategy::LayerWise].into_iter().enumerate() {
                let out = compute_gradients(&model, &batch, &policy, strategy, &step).map_err(|e| e.to_string())?;
                sums[i][j] += grad_error(&out.grads, &exact.grads).map_err(|e| e.to_string())?;
            }
        }
    }
    let means: Vec<[f64; 2]> = sums.iter().map(|s| [s[0] / seeds as f64, s[1] / seeds as f64]).collect();
    let detail = ratios
        .iter()
        .zip(&means)
        .map(|(r, m)| format!("r={r}: prenorm {:.4} vs layerwise {:.4}", m[0], m[1]))
        .collect::<Vec<_>>()
        .join("; ");
    ensure(means.iter().all(|m| m[0] <= m[1]), detail)
}

fn memory_ledger(dir: &Path) -> Verdict {
    let out = cli(dir, &["memsweep", "--ratio", "0.125"])?;
    let failed = failed_checks(&out);

    let root = SeededRng::new(0).child("ledger");
    let config = ModelConfig::default();
    let model = build_model(&config, &mut root.child("model")).map_err(|e| e.to_string())?;
    let task = TaskConfig::default();
    let (batch, _) = build_task(&model, &task, &mut root.child("task")).map_err(|e| e.to_string())?;
    let policy = CompressionPolicy::lowrank(0.125).with_precision(Precision::F32);
    let exact = CompressionPolicy { compress: false, ..policy };
    let step = root.child("step");
    let low = compute_gradients(&model, &batch, &policy, Strategy::PreNorm, &step).map_err(|e| e.to_string())?.ledger;
    let full = compute_gradients(&model, &batch, &exact, Strategy::PreNorm, &step).map_err(|e| e.to_string())?.ledger;

    let (m, n, e) = (task.rows(), config.width, 4);
    let k = policy.rank_for(m, n);
    let units = (2 * config.depth + 1) as u64;
    let formula = units * (((m + n) * k * e + m * e) as u64);
    let ratio = low.stored_total() as f64 / full.stored_total() as f64;
    ensure(
        failed.is_empty() && low.stored_total() == formula && ratio <= 0.25,
        format!(
            "m={m} n={n} k={k}: stored {} = formula {formula}, exact {}, ratio {ratio:.4} {failed:?}",
            low.stored_total(),
            full.stored_total()
        ),
    )
}

fn training_parity() -> Verdict {
    let start = Instant::now();
    let base = TrainConfig::default();
    let exact = train_loop(&TrainConfig { policy: CompressionPolicy { compress: false, ..base.policy }, ..base.clone() })
        .map_err(|e| e.to_string())?;
    let half = train_loop(&TrainConfig { policy: CompressionPolicy { ratio: 0.5, ..base.policy }, ..base.clone() })
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let gap = (half.final_loss - exact.final_loss).abs() / exact.final_loss;
    let monotone = |l: &[f64]| window_means(l, 50).windows(2).all(|w| w[1] < w[0]);
    ensure(
        base.steps == 300 && gap <= 0.10 && monotone(&exact.losses) && monotone(&half.losses) && elapsed < Duration::from_secs(300),
        format!(
            "final loss {:.6} (exact) vs {:.6} (r=1/2), gap {:.2}%, windows monotone {}/{}, {:.1}s",
            exact.final_loss,
            half.final_loss,
            100.0 * gap,
            monotone(&exact.losses),
            monotone(&half.losses),
            elapsed.as_secs_f64()
        ),
    )
}

fn kept_ratio_property() -> Verdict {
    let root = SeededRng::new(3).child("kept");
    let mut notes = Vec::new();
    let mut ok = true;
    for (i, (m, n, k)) in [(256, 128, 8), (512, 64, 4), (128, 128, 16)].into_iter().enumerate() {
        let mut rng = root.child_indexed("noisy", i as u64);
        // Noise singular values come out near 1% of the weakest signal direction.
        let noise = 0.01 / ((m as f64).sqrt() + (n as f64).sqrt());
        let a = synth::low_rank_plus_noise(&mut rng, m, n, k, noise).map_err(|e| e.to_string())?;
        let r = kept_ratio(&singular_spectrum(&a).map_err(|e| e.to_string())?, 0.9).map_err(|e| e.to_string())?;
        ok &= r <= 0.5;
        notes.push(format!("noisy {m}x{n} k={k}: {r:.3}"));
    }
    for (i, (m, n, k)) in [(128, 64, 5), (96, 48, 12), (200, 100, 30)].into_iter().enumerate() {
        let mut rng = root.child_indexed("exact", i as u64);
        let a = synth::exact_rank(&mut rng, m, n, k).map_err(|e| e.to_string())?;
        let r = kept_ratio(&singular_spectrum(&a).map_err(|e| e.to_string())?, 1.0 - 1e-9).map_err(|e| e.to_string())?;
        let count = (r * n as f64).round() as usize;
        ok &= count.abs_diff(k) <= 1;
        notes.push(format!("rank {k} of {n}: kept {count}"));
    }
    ensure(ok, notes.join("; "))
}

const SMALL_CONFIG: &str = r#"
seed = 19
[train]
steps = 60
ratios = [1.0, 0.5]
[decompose]
ks = [2, 4, 8]
[decompose.source]
m = 96
n = 48
[bounds]
range_finder_instances = 100
projection_trials = 100
accumulation_instances = 30
[bounds.scaling]
trials = 100
"#;

fn comparable_json(path: &Path, volatile: &BTreeSet<String>) -> Result<Value, String> {
    let mut doc: Value = serde_json::from_slice(&std::fs::read(path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    doc["meta"].as_object_mut().ok_or("no meta")?.remove("wall_ms");
    // Each rerun writes to its own directory.
    doc["config"].as_object_mut().ok_or("no config")?.remove("output");
    if let Some(tables) = doc["tables"].as_object_mut() {
        tables.retain(|name, _| !volatile.contains(name));
    }
    Ok(doc)
}

fn determinism(dir: &Path) -> Verdict {
    let config = dir.join("small.toml");
    std::fs::write(&config, SMALL_CONFIG).map_err(|e| e.to_string())?;
    let commands: [&[&str]; 6] =
        [&["decompose"], &["spectrum"], &["gradcheck"], &["train"], &["bounds"], &["memsweep"]];
    let mut compared = 0;
    for args in commands {
        let mut runs = Vec::new();
        for rep in ["a", "b"] {
            let out_dir = dir.join(format!("det-{}-{rep}", args[0]));
            let mut argv = vec!["--config", config.to_str().unwrap()];
            argv.extend_from_slice(args);
            runs.push((cli(&out_dir, &argv)?, out_dir));
        }
        let volatile: BTreeSet<String> =
            runs[0].0.report.tables.iter().filter(|t| t.volatile).map(|t| t.name.clone()).collect();
        for (path_a, path_b) in runs[0].0.written.iter().zip(&runs[1].0.written) {
            let name = path_a.file_name().unwrap().to_str().unwrap().to_string();
            let stem = name.trim_end_matches(".csv").trim_end_matches(".json");
            if volatile.iter().any(|v| stem == format!("{}_{v}", args[0])) {
                continue;
            }
            let same = if name.ends_with(".json") {
                comparable_json(path_a, &volatile)? == comparable_json(path_b, &volatile)?
            } else {
                std::fs::read(path_a).map_err(|e| e.to_string())? == std::fs::read(path_b).map_err(|e| e.to_string())?
            };
            if !same {
                return Err(format!("{name} differs between reruns"));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} report files byte-identical across reruns of 6 subcommands"))
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let criteria: Vec<Criterion> = vec![
        ("decomposition optimality", Box::new(decomposition_optimality)),
        ("sampled exact-rank recovery", Box::new(exact_rank_recovery)),
        ("range-finder deterministic bound", Box::new(|| range_finder_bound(&d.join("c3")))),
        ("random projection floor", Box::new(|| projection_floor(&d.join("c4")))),
        ("error accumulation bound", Box::new(|| accumulation_bound(&d.join("c5")))),
        ("gradient fidelity", Box::new(|| gradient_fidelity(&d.join("c6")))),
        ("pre-norm backward", Box::new(prenorm_backward_exact)),
        ("pre-norm vs layer-wise", Box::new(prenorm_beats_layerwise)),
        ("memory ledger", Box::new(|| memory_ledger(&d.join("c9")))),
        ("training parity", Box::new(training_parity)),
        ("kept ratio", Box::new(kept_ratio_property)),
        ("determinism", Box::new(|| determinism(d))),
    ];
    let mut failures = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        let line = match verdict {
            Ok(detail) => format!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failures.push(i + 1);
                format!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1)
            }
        };
        // The stderr handle bypasses the harness capture, so the verdicts show without --nocapture.
        let _ = writeln!(std::io::stderr(), "{line}");
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
