//! Command-line front end for the sound classification pipeline.
//!
//! Subcommands cover the whole workflow: synthetic dataset generation,
//! offline augmentation, training (single split or full cross
//! validation), single-file prediction and report generation. Progress
//! goes to stderr; machine-readable results go to files and stdout.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sbcnn_core::audio::{load_wav, resample, AudioClip, CANONICAL_RATE};
use sbcnn_core::augment::DeformationKind;
use sbcnn_core::features::log_mel;
use sbcnn_core::nn::{load_checkpoint, Model};
use sbcnn_core::pipeline::{
    augment_dataset, augmentation_delta_report, confusion_delta, cross_validate, evaluate,
    load_index, synth_dataset, train, EvaluationReport, FeatureStore, SplitPlan, TrainConfig,
    TrainOptions, URBAN_CLASS_NAMES,
};
use sbcnn_core::sbcnn::{build, predict_clip, SbcnnConfig};

/// Cache directory override honored when `--cache-dir` is absent.
const CACHE_DIR_ENV: &str = "SBCNN_CACHE_DIR";

#[derive(Parser)]
#[command(name = "sbcnn", version, about = "Environmental sound classification pipeline")]
struct Cli {
    /// Optional TOML config file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a separable synthetic dataset.
    Synth(SynthArgs),
    /// Apply augmentation sets to a dataset.
    Augment(AugmentArgs),
    /// Train on one split or run full cross validation.
    Train(TrainArgs),
    /// Classify a single WAV file with a trained checkpoint.
    Predict(PredictArgs),
    /// Build delta tables and box-plot data from stored reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of classes (1..=10).
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Clips per class.
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    metadata: PathBuf,
    /// Directory containing the fold subdirectories.
    #[arg(long)]
    audio_root: PathBuf,
    /// Output dataset directory (originals are copied in).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    sets: SetFlags,
    /// Directory of background-scene WAV files.
    #[arg(long)]
    backgrounds: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = true)]
struct SetFlags {
    /// Time stretching.
    #[arg(long)]
    ts: bool,
    /// Pitch shifts of up to two semitones.
    #[arg(long)]
    ps1: bool,
    /// Pitch shifts of up to 3.5 semitones.
    #[arg(long)]
    ps2: bool,
    /// Dynamic range compression.
    #[arg(long)]
    drc: bool,
    /// Background-scene mixing.
    #[arg(long, requires = "backgrounds")]
    bg: bool,
}

impl SetFlags {
    fn kinds(&self) -> Vec<DeformationKind> {
        let mut kinds = Vec::new();
        if self.ts {
            kinds.push(DeformationKind::TimeStretch);
        }
        if self.ps1 {
            kinds.push(DeformationKind::PitchShift1);
        }
        if self.ps2 {
            kinds.push(DeformationKind::PitchShift2);
        }
        if self.drc {
            kinds.push(DeformationKind::Drc);
        }
        if self.bg {
            kinds.push(DeformationKind::BackgroundNoise);
        }
        kinds
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long)]
    audio_root: PathBuf,
    /// Output directory for checkpoints, logs and reports.
    #[arg(long)]
    out: PathBuf,
    /// Feature cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[command(flatten)]
    fold_sel: FoldSelection,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    /// Fraction of the available patches consumed per epoch.
    #[arg(long)]
    epoch_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Augmentation sets allowed into training (comma-separated tags
    /// among ts,ps1,ps2,drc,bg). Default: all.
    #[arg(long, value_delimiter = ',')]
    sets: Option<Vec<String>>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct FoldSelection {
    /// Test on this fold; validation is the next fold cyclically.
    #[arg(long)]
    fold: Option<u8>,
    /// Cross-validate over every fold.
    #[arg(long)]
    all_folds: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// WAV file to classify.
    #[arg(long)]
    wav: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Baseline evaluation report (JSON).
    #[arg(long)]
    baseline: PathBuf,
    /// Augmented reports as NAME=path pairs (repeatable).
    #[arg(long = "augmented", value_parser = parse_named_path)]
    augmented: Vec<(String, PathBuf)>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_named_path(raw: &str) -> Result<(String, PathBuf), String> {
    match raw.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected NAME=path, got {raw:?}")),
    }
}

/// Defaults loadable from a TOML file; flags override these.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f32>,
    epoch_fraction: Option<f64>,
    seed: Option<u64>,
    cache_dir: Option<PathBuf>,
    threads: Option<usize>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {p:?}"))?;
                toml::from_str(&text).with_context(|| format!("cannot parse config {p:?}"))
            }
        }
    }
}

/// The effective configuration echoed next to every command's outputs.
#[derive(Debug, Serialize)]
struct RunConfig<'a> {
    command: &'a str,
    seed: u64,
    threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cache_dir: Option<&'a Path>,
    paths: serde_json::Value,
}

fn echo_run_config(out_dir: &Path, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("run_config.json");
    std::fs::write(&path, serde_json::to_string_pretty(config)?)?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let file_config = FileConfig::load(cli.config.as_deref())?;
    let threads = cli.threads.or(file_config.threads);
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool already initialized")?;
    }

    match cli.command {
        Command::Synth(args) => cmd_synth(args, &file_config, threads),
        Command::Augment(args) => cmd_augment(args, &file_config, threads),
        Command::Train(args) => cmd_train(args, &file_config, threads),
        Command::Predict(args) => cmd_predict(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_synth(args: SynthArgs, file: &FileConfig, threads: Option<usize>) -> Result<()> {
    let seed = args.seed.or(file.seed).unwrap_or(0);
    std::fs::create_dir_all(&args.out)?;
    let index = synth_dataset(args.per_class, args.classes, seed, &args.out)?;
    echo_run_config(
        &args.out,
        &RunConfig {
            command: "synth",
            seed,
            threads,
            train: None,
            cache_dir: None,
            paths: serde_json::json!({
                "out": args.out,
                "classes": args.classes,
                "per_class": args.per_class,
            }),
        },
    )?;
    log::info!("wrote {} clips to {:?}", index.entries.len(), args.out);
    println!(
        "{}",
        serde_json::json!({
            "metadata": args.out.join("metadata.csv"),
            "audio_root": args.out.join("audio"),
            "clips": index.entries.len(),
        })
    );
    Ok(())
}

fn load_backgrounds(dir: &Path) -> Result<Vec<AudioClip>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read backgrounds directory {dir:?}"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "wav").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .wav files in backgrounds directory {dir:?}");
    }
    paths
        .iter()
        .map(|p| {
            let clip = load_wav(p)?;
            Ok(resample(&clip, CANONICAL_RATE)?)
        })
        .collect()
}

fn cmd_augment(args: AugmentArgs, file: &FileConfig, threads: Option<usize>) -> Result<()> {
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let kinds = args.sets.kinds();
    let backgrounds = match &args.backgrounds {
        Some(dir) => load_backgrounds(dir)?,
        None => Vec::new(),
    };
    let index = load_index(&args.metadata, &args.audio_root)?;
    std::fs::create_dir_all(&args.out)?;
    let out = augment_dataset(&index, &kinds, &backgrounds, seed, &args.out)?;
    echo_run_config(
        &args.out,
        &RunConfig {
            command: "augment",
            seed,
            threads,
            train: None,
            cache_dir: None,
            paths: serde_json::json!({
                "metadata": args.metadata,
                "audio_root": args.audio_root,
                "out": args.out,
                "sets": kinds.iter().map(|k| k.tag()).collect::<Vec<_>>(),
                "backgrounds": args.backgrounds,
            }),
        },
    )?;
    let variants = out.entries.iter().filter(|e| !e.is_original()).count();
    log::info!(
        "augmented dataset: {} originals + {variants} variants",
        out.entries.len() - variants
    );
    println!(
        "{}",
        serde_json::json!({
            "metadata": args.out.join("metadata.csv"),
            "audio_root": args.out.join("audio"),
            "entries": out.entries.len(),
            "variants": variants,
        })
    );
    Ok(())
}

fn parse_sets(raw: &Option<Vec<String>>) -> Result<Vec<DeformationKind>> {
    match raw {
        None => Ok(DeformationKind::ALL.to_vec()),
        Some(tags) => tags
            .iter()
            .map(|t| {
                DeformationKind::from_tag(t.trim())
                    .with_context(|| format!("unknown augmentation set tag {t:?}"))
            })
            .collect(),
    }
}

fn cmd_train(args: TrainArgs, file: &FileConfig, threads: Option<usize>) -> Result<()> {
    let config = TrainConfig {
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(100),
        learning_rate: args.learning_rate.or(file.learning_rate).unwrap_or(0.01),
        epochs: args.epochs.or(file.epochs).unwrap_or(50),
        epoch_fraction: args.epoch_fraction.or(file.epoch_fraction).unwrap_or(0.125),
        seed: args.seed.or(file.seed).unwrap_or(0),
        augmentation_sets: parse_sets(&args.sets)?,
    };
    let cache_dir = args
        .cache_dir
        .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
        .or_else(|| file.cache_dir.clone());

    let index = load_index(&args.metadata, &args.audio_root)?;
    std::fs::create_dir_all(&args.out)?;
    echo_run_config(
        &args.out,
        &RunConfig {
            command: "train",
            seed: config.seed,
            threads,
            train: Some(&config),
            cache_dir: cache_dir.as_deref(),
            paths: serde_json::json!({
                "metadata": args.metadata,
                "audio_root": args.audio_root,
                "out": args.out,
                "fold": args.fold_sel.fold,
                "all_folds": args.fold_sel.all_folds,
            }),
        },
    )?;

    log::info!("extracting features for {} entries", index.entries.len());
    let store = FeatureStore::build(&index, cache_dir.as_deref())?;
    let n_classes = index.n_classes();
    let builder = move |seed: u64| {
        build(
            &SbcnnConfig {
                n_classes,
                ..SbcnnConfig::default()
            },
            seed,
        )
    };

    if args.fold_sel.all_folds {
        let options = TrainOptions {
            checkpoint_dir: Some(args.out.join("checkpoints")),
            record_sampling: false,
        };
        let (report, logs) = cross_validate(&index, &config, &store, &builder, &options)?;
        for (fold_eval, log) in report.per_fold.iter().zip(&logs) {
            std::fs::write(
                args.out.join(format!("train_log_fold{}.json", fold_eval.fold)),
                serde_json::to_string_pretty(log)?,
            )?;
        }
        let report_path = args.out.join("report.json");
        std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
        println!(
            "{}",
            serde_json::json!({
                "report": report_path,
                "mean_accuracy": report.mean_accuracy,
                "folds": report.per_fold.len(),
            })
        );
    } else {
        let fold = args.fold_sel.fold.expect("clap group guarantees one");
        let plan = SplitPlan::cyclic(fold, &index.folds())?;
        let options = TrainOptions {
            checkpoint_dir: Some(args.out.join("checkpoints").join(format!("fold{fold}"))),
            record_sampling: false,
        };
        let (model, log) = train(&index, &plan, &config, &store, &builder, &options)?;
        let eval = evaluate(&model, &index, fold, &store)?;
        std::fs::write(
            args.out.join(format!("train_log_fold{fold}.json")),
            serde_json::to_string_pretty(&log)?,
        )?;
        let report_path = args.out.join(format!("report_fold{fold}.json"));
        std::fs::write(&report_path, serde_json::to_string_pretty(&eval)?)?;
        println!(
            "{}",
            serde_json::json!({
                "report": report_path,
                "fold": fold,
                "accuracy": eval.accuracy,
                "best_epoch": log.best_epoch,
            })
        );
    }
    Ok(())
}

fn class_name(index: usize) -> String {
    URBAN_CLASS_NAMES
        .get(index)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class_{index}"))
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let model: Model<f32> = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {:?}", args.checkpoint))?;
    let clip = load_wav(&args.wav)?;
    let clip = resample(&clip, CANONICAL_RATE)?;
    let spec = log_mel(&clip)?;
    let prediction = predict_clip(&model, &spec)?;
    println!(
        "{}",
        serde_json::json!({
            "class_index": prediction.class,
            "class_name": class_name(prediction.class),
            "posteriors": prediction.mean_activation,
        })
    );
    Ok(())
}

fn read_report(path: &Path) -> Result<EvaluationReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {path:?}"))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse report {path:?}"))
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let baseline = read_report(&args.baseline)?;
    let augmented: Vec<(String, EvaluationReport)> = args
        .augmented
        .iter()
        .map(|(name, path)| Ok((name.clone(), read_report(path)?)))
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(&args.out)?;
    let delta = augmentation_delta_report(&baseline, &augmented)?;
    std::fs::write(
        args.out.join("delta_report.json"),
        serde_json::to_string_pretty(&delta)?,
    )?;

    let mut boxplots = serde_json::Map::new();
    boxplots.insert("baseline".into(), serde_json::to_value(&baseline.boxplot)?);
    for (name, report) in &augmented {
        boxplots.insert(name.clone(), serde_json::to_value(&report.boxplot)?);
        let cd = confusion_delta(report, &baseline)?;
        std::fs::write(
            args.out.join(format!("confusion_delta_{name}.json")),
            serde_json::to_string_pretty(&cd)?,
        )?;
    }
    std::fs::write(
        args.out.join("boxplot.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(boxplots))?,
    )?;

    println!(
        "{}",
        serde_json::json!({
            "delta_report": args.out.join("delta_report.json"),
            "boxplot": args.out.join("boxplot.json"),
            "sets": delta.sets,
        })
    );
    Ok(())
}
