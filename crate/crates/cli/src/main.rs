//! `nodseg`: batch driver for the segmentation toolkit.
//!
//! Exit status is 0 on success, 2 for configuration or validation errors and
//! 1 for any other failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nodseg_core::config::RunConfig;
use nodseg_core::imaging_io::{self, SlicePrediction};
use nodseg_core::metrics::{comparison_table, MetricsReport};
use nodseg_core::roi_pipeline::preprocess_scans;
use nodseg_core::trainer::{self, select_split, Phase, Split};
use nodseg_core::{Error, Model, SlicePatch};

#[derive(Parser)]
#[command(name = "nodseg", version, about = "Multitask lung nodule segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crop annotated nodules from CT volumes into a patch dataset.
    Preprocess(RunArgs),
    /// Train without the STD prior (constant learning rate).
    Pretrain(RunArgs),
    /// Train with step decay, optionally starting from a checkpoint.
    Finetune(RunArgs),
    /// k-fold cross-validation of the fine-tuning phase.
    Crossval(RunArgs),
    /// Score a checkpoint (or stored predictions) on a split.
    Evaluate(EvaluateArgs),
    /// Write masks and probability maps for a split.
    Predict(RunArgs),
    /// Merge metrics reports into a comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory (for training: the weights to start from).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// train, val, test or foldN.
    #[arg(long)]
    split: Option<String>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides data.seed and train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Directory of stored predictions to score instead of running a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// metrics.json files, one per run.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Also write report.md here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.downcast_ref::<Error>().is_some_and(Error::is_validation);
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Preprocess(a) => preprocess(&a),
        Command::Pretrain(a) => train(&a, Phase::Pretrain),
        Command::Finetune(a) => train(&a, Phase::Finetune),
        Command::Crossval(a) => crossval(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Predict(a) => predict(&a),
        Command::Report(a) => report(&a),
    }
}

fn load_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn parse_split(a: &RunArgs, default: Split) -> Result<Split> {
    Ok(match &a.split {
        Some(s) => s.parse::<Split>()?,
        None => default,
    })
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<SlicePatch>> {
    let dir = cfg.require_path("data.patch_dir", &cfg.data.patch_dir)?;
    let (_, patches) = imaging_io::load_patch_dataset(dir)?;
    let selected = select_split(&patches, split);
    if selected.is_empty() {
        return Err(Error::Config(format!("split {split:?} of {} is empty", dir.display())).into());
    }
    Ok(selected)
}

/// Accepts either a checkpoint directory or a run directory containing one.
fn checkpoint_dir(p: &Path) -> PathBuf {
    let nested = p.join("checkpoint");
    if !p.join("metadata.json").exists() && nested.join("metadata.json").exists() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("metrics.json"), report)?;
    fs::write(dir.join("metrics.csv"), report.to_csv()).with_context(|| format!("writing metrics.csv in {}", dir.display()))
}

fn preprocess(a: &RunArgs) -> Result<()> {
    let mut cfg = load_config(a)?;
    let volumes = cfg.require_path("data.volumes_dir", &cfg.data.volumes_dir)?;
    let annotations = cfg.require_path("data.annotations_csv", &cfg.data.annotations_csv)?;
    let out = if a.out == Path::new(".") && !cfg.data.patch_dir.as_os_str().is_empty() {
        cfg.data.patch_dir.clone()
    } else {
        a.out.clone()
    };
    let (patches, summary) = preprocess_scans(volumes, annotations, &cfg.data.preprocess_options())?;
    imaging_io::write_patch_dataset(&patches, &out)?;
    write_json(&out.join("preprocess_summary.json"), &summary)?;
    cfg.data.patch_dir = fs::canonicalize(&out)?;
    cfg.write_resolved(&out)?;
    log::info!(
        "{} volumes, {} lesions, {} slices written to {}",
        summary.volumes,
        summary.lesions,
        summary.slices,
        out.display()
    );
    Ok(())
}

fn train(a: &RunArgs, phase: Phase) -> Result<()> {
    let mut cfg = load_config(a)?;
    if let Some(c) = &a.checkpoint {
        cfg.train.resume = Some(checkpoint_dir(c));
    }
    let dataset = load_split(&cfg, parse_split(a, Split::Train)?)?;
    let train_cfg = cfg.train.for_phase(phase);
    let mut model = Model::new(&cfg.model, cfg.train.seed)?;
    cfg.write_resolved(&a.out)?;
    let outcome = trainer::train(
        &mut model,
        &dataset,
        &train_cfg,
        &cfg.freeze_spec(),
        cfg.train.resume.as_deref(),
        Some(&a.out),
    )?;
    if let Some(last) = outcome.log.last() {
        log::info!("final epoch {}: loss {:.5}, train dice {:.4}", last.epoch, last.loss_total, last.train_dice);
    }
    Ok(())
}

fn crossval(a: &RunArgs) -> Result<()> {
    let mut cfg = load_config(a)?;
    if let Some(c) = &a.checkpoint {
        cfg.train.resume = Some(checkpoint_dir(c));
    }
    let dataset = load_split(&cfg, Split::Train)?;
    cfg.write_resolved(&a.out)?;
    let cv = trainer::crossvalidate(
        &dataset,
        &cfg.model,
        cfg.train.seed,
        &cfg.train.for_phase(Phase::Finetune),
        &cfg.freeze_spec(),
        cfg.train.resume.as_deref(),
        &cfg.eval,
    )?;
    for (k, r) in cv.folds.iter().enumerate() {
        write_report(r, &a.out.join(format!("fold{k}")))?;
    }
    write_json(&a.out.join("crossval.json"), &cv)?;
    let rows: Vec<(String, _)> = cv
        .folds
        .iter()
        .enumerate()
        .map(|(k, r)| (format!("fold{k}"), r.summary))
        .chain(std::iter::once(("mean".to_string(), cv.pooled.mean)))
        .collect();
    println!("{}", comparison_table(&rows));
    Ok(())
}

/// Loads a checkpoint and reports whether its phase trains with the STD prior.
fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Model, bool)> {
    let dir = checkpoint
        .map(checkpoint_dir)
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let model = Model::new(&cfg.model, cfg.train.seed)?;
    let meta = trainer::load_checkpoint(&model, &dir)?;
    let std_enabled = cfg.train.for_phase(meta.phase).std_enabled;
    Ok((model, std_enabled))
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = load_config(&a.run)?;
    let dataset = load_split(&cfg, parse_split(&a.run, Split::Test)?)?;
    let report = match &a.predictions {
        Some(dir) => {
            let preds = imaging_io::read_predictions(dir)?;
            trainer::evaluate_stored(&preds, &dataset, cfg.eval.aggregation)?
        }
        None => {
            let (model, std_enabled) = load_model(&cfg, a.run.checkpoint.as_deref())?;
            trainer::evaluate_model(&model, &dataset, std_enabled, &cfg.eval)?
        }
    };
    write_report(&report, &a.run.out)?;
    cfg.write_resolved(&a.run.out)?;
    println!("{}", comparison_table(&[("this run".to_string(), report.summary)]));
    Ok(())
}

fn predict(a: &RunArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let dataset = load_split(&cfg, parse_split(a, Split::Test)?)?;
    let (model, std_enabled) = load_model(&cfg, a.checkpoint.as_deref())?;
    let probs = trainer::predict(&model, &dataset, std_enabled, cfg.eval.batch_size)?;
    let preds: Vec<SlicePrediction> = dataset
        .iter()
        .zip(probs)
        .map(|(p, prob)| SlicePrediction {
            lesion_id: p.lesion_id.clone(),
            slice_index: p.slice_index,
            mask: prob.mapv(|v| v as f64 >= cfg.eval.threshold),
            prob: Some(prob),
        })
        .collect();
    imaging_io::write_predictions(&preds, cfg.eval.threshold, &a.out)?;
    cfg.write_resolved(&a.out)?;
    log::info!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn run_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "metrics" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()) {
            return parent.to_string_lossy().into_owned();
        }
    }
    stem
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut rows = Vec::with_capacity(a.reports.len());
    for path in &a.reports {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{} is not a metrics report: {e}", path.display())))?;
        rows.push((run_name(path), report.summary));
    }
    let table = comparison_table(&rows);
    println!("{table}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.md"), &table)?;
    }
    Ok(())
}
