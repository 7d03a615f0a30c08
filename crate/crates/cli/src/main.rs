//! Command-line entry point: dataset generation, training, evaluation,
//! ablation, feature export, and the built-in oracle/gradient check suite.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error. Every run that produces outputs writes its resolved
//! configuration next to them so it can be replayed exactly.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use memseg_core::data::generate::{generate_dataset, generate_scene};
use memseg_core::data::manifest::DatasetManifest;
use memseg_core::eval::{
    ablation_run, evaluate, export_features, format_ablation_table, ClassAveraging,
};
use memseg_core::selfcheck;
use memseg_core::train::checkpoint::{load_checkpoint, save_checkpoint};
use memseg_core::train::config::RunConfig;
use memseg_core::train::{fit, format_log};

#[derive(Parser)]
#[command(
    name = "memseg",
    about = "Sequential multi-modal semantic segmentation toolkit",
    version
)]
struct Cli {
    /// Worker threads for shardable work (dataset generation); other
    /// commands run single-threaded for reproducibility.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Train and evaluate the four-row toggle ablation.
    Ablate(TrainArgs),
    /// Dump pre/post-memory feature vectors for one scene.
    ExportFeatures(ExportArgs),
    /// Run the oracle and gradient check suite.
    Check,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    /// Square frame size in pixels (divisible by 16, minimum 32).
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Comma-separated modality names.
    #[arg(long, default_value = "intensity,distance,edge_event")]
    modalities: String,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file; bare names are also looked up under
    /// $MEMSEG_CONFIG_DIR.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config file's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// key=value overrides applied on top of the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest file, or a dataset root when --split is given.
    #[arg(long)]
    manifest: PathBuf,
    /// Split subdirectory under --manifest (e.g. train, val).
    #[arg(long)]
    split: Option<String>,
    /// Also export pre/post-memory features for this scene index.
    #[arg(long)]
    export_features: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    scene: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Failure category controlling the exit code.
enum CliError {
    /// Bad configuration or arguments: exit 2.
    Config(String),
    /// Runtime failure: exit 1.
    Runtime(String),
}

impl From<memseg_core::Error> for CliError {
    fn from(e: memseg_core::Error) -> Self {
        match e {
            memseg_core::Error::Config(m) => CliError::Config(format!("config: {m}")),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a, cli.workers),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::ExportFeatures(a) => cmd_export(&a),
        Command::Check => cmd_check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: config: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: runtime: {m}");
            ExitCode::from(1)
        }
    }
}

/// Locate a config file, consulting $MEMSEG_CONFIG_DIR for bare names.
fn resolve_config_path(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    if let Ok(dir) = std::env::var("MEMSEG_CONFIG_DIR") {
        let candidate = Path::new(&dir).join(path);
        if candidate.exists() {
            return candidate;
        }
    }
    path.to_path_buf()
}

fn load_run_config(
    config: Option<&PathBuf>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut cfg = match config {
        Some(path) => {
            let path = resolve_config_path(path);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    DatasetManifest::load(path).map_err(CliError::from)
}

fn cmd_gen_data(a: &GenDataArgs, workers: usize) -> Result<(), CliError> {
    if workers == 0 {
        return Err(CliError::Config("workers must be at least 1".into()));
    }
    let modalities: Vec<String> = a.modalities.split(',').map(|s| s.trim().to_string()).collect();
    std::fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;
    let manifest = if workers <= 1 {
        generate_dataset(a.seed, a.scenes, a.size, &modalities, a.classes, &a.out)?
    } else {
        // Scenes are independent and seeded per index, so sharding across
        // threads yields the identical dataset in any worker count.
        let mut samples = Vec::with_capacity(a.scenes);
        let shards = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for shard in 0..workers {
                let modalities = &modalities;
                let out = &a.out;
                handles.push(scope.spawn(move || {
                    let mut entries = Vec::new();
                    let mut idx = shard;
                    while idx < a.scenes {
                        let scene_id = format!("scene_{idx:04}");
                        entries.push((
                            idx,
                            generate_scene(
                                a.seed, idx, &scene_id, a.size, modalities, a.classes, out,
                            ),
                        ));
                        idx += workers;
                    }
                    entries
                }));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("generation worker panicked"))
                .collect::<Vec<_>>()
        });
        let mut indexed = Vec::with_capacity(a.scenes);
        for shard in shards {
            for (idx, entry) in shard {
                indexed.push((idx, entry?));
            }
        }
        indexed.sort_by_key(|(idx, _)| *idx);
        samples.extend(indexed.into_iter().map(|(_, e)| e));
        let manifest = DatasetManifest {
            root: a.out.clone(),
            seed: a.seed,
            size: a.size,
            num_classes: a.classes,
            modalities,
            samples,
        };
        manifest.save(&a.out.join("manifest.txt"))?;
        manifest
    };
    println!(
        "generated {} scenes ({}x{}, {} modalities, {} classes) under {}",
        manifest.samples.len(),
        a.size,
        a.size,
        manifest.modalities.len(),
        a.classes,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = load_run_config(a.config.as_ref(), &a.overrides, a.seed)?;
    if cfg.train_manifest.is_empty() {
        return Err(CliError::Config("train_manifest is not set".into()));
    }
    let train_m = load_manifest(Path::new(&cfg.train_manifest))?;
    let val_m = if cfg.val_manifest.is_empty() {
        None
    } else {
        Some(load_manifest(Path::new(&cfg.val_manifest))?)
    };
    write_out(&a.out, "resolved.cfg", &cfg.to_text())?;
    let outcome = fit(&train_m, val_m.as_ref(), &cfg)?;
    write_out(&a.out, "metrics.txt", &format_log(&outcome.log))?;
    save_checkpoint(&a.out.join("checkpoint.bin"), &outcome.checkpoint(&cfg))?;
    println!(
        "trained {} steps; best validation mIoU {:.2}",
        outcome.step,
        outcome.best_miou.max(0.0)
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let cfg = load_run_config(a.config.as_ref(), &a.overrides, a.seed)?;
    let manifest_path = match &a.split {
        Some(split) => a.manifest.join(split).join("manifest.txt"),
        None => a.manifest.clone(),
    };
    let manifest = load_manifest(&manifest_path)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = cfg.model_config(manifest.num_classes);
    write_out(&a.out, "resolved.cfg", &cfg.to_text())?;
    let (metrics, _) = evaluate(&ckpt.store, &model, &manifest, ClassAveraging::IncludeAll)?;
    let mut report = String::new();
    report.push_str(&format!("miou {:.2}\n", metrics.miou));
    for (i, (iou, acc)) in metrics
        .per_class_iou
        .iter()
        .zip(&metrics.per_class_acc)
        .enumerate()
    {
        report.push_str(&format!("class {i} iou {iou:.2} acc {acc:.2}\n"));
    }
    write_out(&a.out, "eval.txt", &report)?;
    print!("{report}");
    if let Some(scene) = a.export_features {
        export_features(&ckpt.store, &model, &manifest, scene, &a.out.join("features"))?;
    }
    Ok(())
}

fn cmd_ablate(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = load_run_config(a.config.as_ref(), &a.overrides, a.seed)?;
    if cfg.train_manifest.is_empty() {
        return Err(CliError::Config("train_manifest is not set".into()));
    }
    let train_m = load_manifest(Path::new(&cfg.train_manifest))?;
    let val_m = if cfg.val_manifest.is_empty() {
        train_m.clone()
    } else {
        load_manifest(Path::new(&cfg.val_manifest))?
    };
    write_out(&a.out, "resolved.cfg", &cfg.to_text())?;
    let rows = ablation_run(&train_m, &val_m, &cfg)?;
    let table = format_ablation_table(&rows, cfg.seed);
    write_out(&a.out, "ablation.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<(), CliError> {
    let cfg = load_run_config(a.config.as_ref(), &a.overrides, None)?;
    let manifest = load_manifest(&a.manifest)?;
    if a.scene >= manifest.samples.len() {
        return Err(CliError::Config(format!(
            "scene {} out of range (manifest has {})",
            a.scene,
            manifest.samples.len()
        )));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = cfg.model_config(manifest.num_classes);
    write_out(&a.out, "resolved.cfg", &cfg.to_text())?;
    let files = export_features(&ckpt.store, &model, &manifest, a.scene, &a.out)?;
    println!("wrote {} feature files under {}", files.len(), a.out.display());
    Ok(())
}

fn cmd_check() -> Result<(), CliError> {
    let mut failed = false;
    for r in selfcheck::run_all() {
        println!("{} {}", if r.passed { "ok  " } else { "FAIL" }, r.name);
        if !r.passed {
            eprintln!("     {}", r.detail);
            failed = true;
        }
    }
    match selfcheck::gradient_checks() {
        Ok(report) if report.passes(1e-4) => {
            println!(
                "ok   gradient_checks (max relative error {:.3e})",
                report.max_relative_error
            );
        }
        Ok(report) => {
            println!("FAIL gradient_checks");
            eprintln!(
                "     max relative error {:.3e}: {:?}",
                report.max_relative_error, report.per_parameter_errors
            );
            failed = true;
        }
        Err(e) => {
            println!("FAIL gradient_checks");
            eprintln!("     {e}");
            failed = true;
        }
    }
    if failed {
        Err(CliError::Runtime("self-check failures".into()))
    } else {
        Ok(())
    }
}
