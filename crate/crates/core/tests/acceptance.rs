//! Acceptance suite: one pass/fail line per criterion. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines as they
//! complete; any failure reprints the full report in the panic message.

use std::fmt::Write as _;
use std::time::Duration;

// Runtime budgets are checked against process CPU time rather than wall
// clock: every timed stage is single-threaded, so CPU time equals wall time
// on an otherwise idle machine (the budgets' intent), while staying
// insensitive to unrelated load on shared CI hosts.
use cpu_time::ProcessTime;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use memseg_core::data::generate::generate_dataset;
use memseg_core::data::manifest::DatasetManifest;
use memseg_core::memory::{init_model_params, run_sequence, ModelConfig};
use memseg_core::numerics::NdArray;
use memseg_core::params::{ParamStore, Session};
use memseg_core::selfcheck;
use memseg_core::spmm::{momentum_update, PrototypeBank, PROTO_DIM};
use memseg_core::train::checkpoint::{load_checkpoint, save_checkpoint};
use memseg_core::train::config::RunConfig;
use memseg_core::train::{fit, format_log, init_params};
use memseg_core::eval::{ablation_run, format_ablation_table};

/// Calibrated toy-benchmark learning rate (the shipped default targets the
/// reference training recipe and converges too slowly at toy scale).
const TOY_BASE_LR: f64 = 0.003;
/// Toy benchmark mIoU threshold, frozen from a seed-42 reference run.
const TOY_TARGET_MIOU: f64 = 85.0;

struct Criterion {
    line: String,
    passed: bool,
}

fn report(results: &mut Vec<Criterion>, id: usize, name: &str, passed: bool, detail: String) {
    let line = format!(
        "{} [{}] {}: {}",
        if passed { "PASS" } else { "FAIL" },
        id,
        name,
        detail
    );
    println!("{line}");
    results.push(Criterion { line, passed });
}

fn test_frames(n: usize, h: usize, w: usize) -> Vec<NdArray> {
    (0..n)
        .map(|f| {
            NdArray::from_vec(
                &[1, h, w],
                (0..h * w)
                    .map(|p| ((p + 13 * f) as f64 * 0.37).sin())
                    .collect(),
            )
            .unwrap()
        })
        .collect()
}

fn fused_values(store: &ParamStore, cfg: &ModelConfig, frames: &[NdArray]) -> Vec<f64> {
    let mut sess = Session::new(store);
    let out = run_sequence(&mut sess, cfg, frames).unwrap();
    sess.g.value(out.fused_logits).data().to_vec()
}

fn criterion_1(results: &mut Vec<Criterion>) {
    let start = ProcessTime::now();
    let checks = selfcheck::run_all();
    let elapsed = start.elapsed();
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name)
        .collect();
    report(
        results,
        1,
        "oracle suite",
        failed.is_empty() && elapsed < Duration::from_secs(30),
        format!(
            "{}/{} oracles green in {:.1}s CPU (budget 30s){}",
            checks.len() - failed.len(),
            checks.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failed: {failed:?}")
            }
        ),
    );
}

fn criterion_2(results: &mut Vec<Criterion>) {
    let start = ProcessTime::now();
    let outcome = selfcheck::gradient_checks();
    let elapsed = start.elapsed();
    match outcome {
        Ok(r) => report(
            results,
            2,
            "gradient checks",
            r.passes(1e-4) && elapsed < Duration::from_secs(120),
            format!(
                "max relative error {:.3e} over {} parameters in {:.1}s (tolerance 1e-4, budget 120s CPU)",
                r.max_relative_error,
                r.per_parameter_errors.len(),
                elapsed.as_secs_f64()
            ),
        ),
        Err(e) => report(results, 2, "gradient checks", false, e.to_string()),
    }
}

fn criterion_3(results: &mut Vec<Criterion>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0_f64;
    for &mu in &[0.05, 0.2, 0.8] {
        let p0: Vec<f64> = (0..PROTO_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..PROTO_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut bank = PrototypeBank::new(1, mu).unwrap();
        bank.seen = vec![true];
        bank.global = NdArray::from_vec(&[1, PROTO_DIM], p0.clone()).unwrap();
        let cur = NdArray::from_vec(&[1, PROTO_DIM], target.clone()).unwrap();
        let k = 10;
        for _ in 0..k {
            momentum_update(&mut bank, &cur, &[true]).unwrap();
        }
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let got = dist(bank.global.data(), &target);
        let want = (1.0 - mu).powi(k) * dist(&p0, &target);
        worst = worst.max((got - want).abs());
    }
    report(
        results,
        3,
        "momentum convergence law",
        worst < 1e-9,
        format!("max |distance - (1-mu)^k * initial| = {worst:.2e} for mu in {{0.05, 0.2, 0.8}}, k=10 (tolerance 1e-9)"),
    );
}

fn criterion_4(results: &mut Vec<Criterion>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let on = ModelConfig::new(3);
    let off = ModelConfig {
        use_memory: false,
        ..on
    };
    let mut store = ParamStore::new();
    init_model_params(&mut store, &on, &mut rng);

    // (a) Single frame: the memory mechanism has nothing to read or bank.
    let one = test_frames(1, 32, 32);
    let a_ok = fused_values(&store, &on, &one) == fused_values(&store, &off, &one);

    // (b) Zero-initialized memory output projections: memory-on equals
    // memory-off on a multi-frame scene.
    let three = test_frames(3, 32, 32);
    let diff = fused_values(&store, &on, &three)
        .iter()
        .zip(fused_values(&store, &off, &three))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0_f64, f64::max);
    let b_ok = diff < 1e-7;

    // (c) The prototype module is training-only: toggling it leaves the
    // forward pass bit-identical.
    let mut with_spmm = RunConfig::default();
    with_spmm.spmm = true;
    let mut without_spmm = RunConfig::default();
    without_spmm.spmm = false;
    let c_ok = fused_values(&store, &with_spmm.model_config(3), &three)
        == fused_values(&store, &without_spmm.model_config(3), &three);

    report(
        results,
        4,
        "structural equivalences",
        a_ok && b_ok && c_ok,
        format!(
            "single-frame == memory-off bit-exact: {a_ok}; zero-init memory-on vs off max |diff| = {diff:.1e} (tolerance 1e-7); forward invariant to prototype toggle: {c_ok}"
        ),
    );
}

fn toy_config(data_root: &std::path::Path) -> RunConfig {
    RunConfig {
        base_lr: TOY_BASE_LR,
        seed: 42,
        target_miou: TOY_TARGET_MIOU,
        train_manifest: data_root
            .join("train/manifest.txt")
            .to_string_lossy()
            .into_owned(),
        val_manifest: data_root
            .join("val/manifest.txt")
            .to_string_lossy()
            .into_owned(),
        ..RunConfig::default()
    }
}

fn criterion_5(
    results: &mut Vec<Criterion>,
    train_m: &DatasetManifest,
    val_m: &DatasetManifest,
    cfg: &RunConfig,
) {
    let start = ProcessTime::now();
    match fit(train_m, Some(val_m), cfg) {
        Ok(outcome) => {
            let elapsed = start.elapsed();
            let epochs_run = (outcome.step as usize).div_ceil(train_m.samples.len().div_ceil(cfg.batch_size));
            report(
                results,
                5,
                "toy benchmark",
                outcome.best_miou >= TOY_TARGET_MIOU && elapsed < Duration::from_secs(600),
                format!(
                    "held-out mIoU {:.2} (threshold {TOY_TARGET_MIOU}) after {epochs_run} epochs in {:.0}s CPU (budgets: 30 epochs, 600s CPU)",
                    outcome.best_miou,
                    elapsed.as_secs_f64()
                ),
            );
        }
        Err(e) => report(results, 5, "toy benchmark", false, e.to_string()),
    }
}

fn criterion_6(
    results: &mut Vec<Criterion>,
    train_m: &DatasetManifest,
    val_m: &DatasetManifest,
    cfg: &RunConfig,
) {
    // Same seed, dataset, and schedule as criterion 5, but with early
    // stopping disabled so all four rows train for the identical 30-epoch
    // budget. The budget cannot be shortened independently of the schedule:
    // the polynomial decay is defined over the configured epoch count, so a
    // smaller `epochs` changes every row's learning-rate trajectory.
    let cfg = RunConfig {
        target_miou: 0.0,
        ..cfg.clone()
    };
    match ablation_run(train_m, val_m, &cfg) {
        Ok(rows) => {
            let table = format_ablation_table(&rows, cfg.seed);
            let no_memory = rows
                .iter()
                .find(|r| !r.memory)
                .map(|r| r.miou)
                .unwrap_or(f64::NAN);
            let full = rows
                .iter()
                .find(|r| r.memory && r.residual && r.spmm)
                .map(|r| r.miou)
                .unwrap_or(f64::NAN);
            let margin = full - no_memory;
            let mut detail = format!(
                "{} rows; full {:.2} vs no-memory {:.2} mIoU, margin {margin:+.2}\n",
                rows.len(),
                full,
                no_memory
            );
            for line in table.lines() {
                let _ = writeln!(detail, "    {line}");
            }
            report(
                results,
                6,
                "ablation direction",
                rows.len() == 4 && margin > 0.0,
                detail.trim_end().to_string(),
            );
        }
        Err(e) => report(results, 6, "ablation direction", false, e.to_string()),
    }
}

fn criterion_7(
    results: &mut Vec<Criterion>,
    train_m: &DatasetManifest,
    val_m: &DatasetManifest,
    cfg: &RunConfig,
    tmp: &std::path::Path,
) {
    let small = DatasetManifest {
        samples: train_m.samples[..16].to_vec(),
        ..train_m.clone()
    };
    let cfg = RunConfig {
        epochs: 2,
        warmup_epochs: 1,
        target_miou: 0.0,
        ..cfg.clone()
    };
    let run = || fit(&small, Some(val_m), &cfg);
    match (run(), run()) {
        (Ok(a), Ok(b)) => {
            let logs_equal = format_log(&a.log) == format_log(&b.log);
            let pa = tmp.join("det_a.bin");
            let pb = tmp.join("det_b.bin");
            save_checkpoint(&pa, &a.checkpoint(&cfg)).unwrap();
            save_checkpoint(&pb, &b.checkpoint(&cfg)).unwrap();
            let bytes_a = std::fs::read(&pa).unwrap();
            let bytes_equal = bytes_a == std::fs::read(&pb).unwrap();
            // The checkpoint must also round-trip bit-exactly.
            let reread = load_checkpoint(&pa).unwrap();
            let roundtrip = reread.store.iter().count() == a.store.iter().count()
                && reread.store.iter().all(|(name, entry)| {
                    a.store
                        .get(name)
                        .map(|e| e.value == entry.value && e.frozen == entry.frozen)
                        .unwrap_or(false)
                });
            report(
                results,
                7,
                "determinism",
                logs_equal && bytes_equal && roundtrip,
                format!(
                    "identical metric logs: {logs_equal}; identical checkpoint bytes: {bytes_equal}; checkpoint round-trip bit-exact: {roundtrip}"
                ),
            );
        }
        (Err(e), _) | (_, Err(e)) => report(results, 7, "determinism", false, e.to_string()),
    }
}

fn criterion_8(results: &mut Vec<Criterion>) {
    let base = RunConfig {
        freeze_backbone: true,
        ..RunConfig::default()
    };
    let num_classes = 4;
    let store = init_params(&base, num_classes);
    let model = base.model_config(num_classes);

    // Closed-form adapter count: rank * (2 d_Q + 2 d_V) per attention
    // block, d_Q = d_V = stage width.
    let lora_closed_form: usize = model
        .encoder
        .stage_widths
        .iter()
        .map(|&d| model.encoder.lora_rank * 4 * d)
        .sum();
    let unfrozen_rest: usize = store
        .iter()
        .filter(|(n, _)| !n.starts_with("enc."))
        .map(|(_, e)| e.value.numel())
        .sum();
    let trainable = store.trainable_scalars();
    let count_ok =
        trainable == lora_closed_form + unfrozen_rest
        && lora_closed_form == model.encoder.lora_param_count();

    // Enabling the prototype module adds exactly the projection conv...
    let no_spmm = init_params(
        &RunConfig {
            spmm: false,
            ..base.clone()
        },
        num_classes,
    );
    let proj_numel = store.value("proto.proj.w").unwrap().numel()
        + store.value("proto.proj.b").unwrap().numel();
    let spmm_delta = trainable - no_spmm.trainable_scalars();
    let spmm_ok = spmm_delta == proj_numel;

    // ...and reusing the decoder projection makes the delta exactly zero.
    let reuse = init_params(
        &RunConfig {
            reuse_projection: true,
            ..base.clone()
        },
        num_classes,
    );
    let reuse_delta = reuse.trainable_scalars() as i64 - no_spmm.trainable_scalars() as i64;
    let reuse_ok = reuse_delta == 0;

    report(
        results,
        8,
        "trainable-parameter accounting",
        count_ok && spmm_ok && reuse_ok,
        format!(
            "frozen-backbone trainable {trainable} == adapters {lora_closed_form} + rest {unfrozen_rest}: {count_ok}; prototype-module delta {spmm_delta} == projection {proj_numel}: {spmm_ok}; reuse-projection delta {reuse_delta} == 0: {reuse_ok}"
        ),
    );
}

#[test]
fn acceptance() {
    let tmp = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&tmp);
    std::fs::create_dir_all(&tmp).unwrap();

    let mut results = Vec::new();
    criterion_1(&mut results);
    criterion_2(&mut results);
    criterion_3(&mut results);
    criterion_4(&mut results);

    let modalities: Vec<String> = ["intensity", "distance", "edge_event"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let train_m =
        generate_dataset(42, 200, 64, &modalities, 4, &tmp.join("train")).unwrap();
    let val_m = generate_dataset(43, 40, 64, &modalities, 4, &tmp.join("val")).unwrap();
    let cfg = toy_config(&tmp);

    criterion_5(&mut results, &train_m, &val_m, &cfg);
    criterion_6(&mut results, &train_m, &val_m, &cfg);
    criterion_7(&mut results, &train_m, &val_m, &cfg, &tmp);
    criterion_8(&mut results);

    let _ = std::fs::remove_dir_all(&tmp);
    let failed: Vec<&str> = results
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.line.as_str())
        .collect();
    let full: Vec<&str> = results.iter().map(|c| c.line.as_str()).collect();
    assert!(
        failed.is_empty(),
        "{} of {} acceptance criteria failed:\n{}",
        failed.len(),
        results.len(),
        full.join("\n")
    );
}
