use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use ovemo_core::caption::{build_caption_dataset, CaptionError, CaptionJob, ImageRef};
use ovemo_core::config::{ConfigError, RunConfig};
use ovemo_core::fusion::{FusionConfig, FusionStrategy};
use ovemo_core::ingest::{ingest, IngestError};
use ovemo_core::jsonl;
use ovemo_core::metrics::{render_table, MetricReport};
use ovemo_core::model::PredictionRecord;
use ovemo_core::runflow::{
    evaluate_models, load_reports, run_all, run_eval, run_fuse_eval, run_inference, select_frames, Run, RunError,
};

#[derive(Parser)]
#[command(name = "ovemo", version, about = "Open-vocabulary video emotion recognition pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, short, global = true, default_value = "ovemo.json")]
    config: PathBuf,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Override the caption filter threshold.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Override the sample-level concurrency cap.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    /// Override the fusion strategy.
    #[arg(long, global = true)]
    strategy: Option<FusionStrategy>,
    /// Override the minimum vote count for vote fusion.
    #[arg(long, global = true)]
    min_votes: Option<usize>,
    /// More log output on stderr (repeatable).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Select frame indices for every sample and write frames.jsonl.
    Sample,
    /// Extract frames from raw videos with an external tool.
    Ingest {
        #[arg(long, default_value = "ffmpeg")]
        tool: String,
    },
    /// Build the filtered caption dataset.
    Captions,
    /// Query each model for every sample.
    Infer {
        /// Comma-separated model ids (default: all configured).
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
    },
    /// Fuse stored predictions and evaluate the result.
    Fuse,
    /// Score stored predictions (and any fused predictions) against ground truth.
    Eval {
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
    },
    /// Print the table of all reports in the output directory.
    Report,
    /// sample, infer, fuse and eval in one go.
    Run,
}

/// Applies flag overrides, validates and persists the effective config.
fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.output {
        cfg.output_dir = std::path::absolute(out)?;
    }
    if let Some(c) = common.concurrency {
        cfg.concurrency = c;
    }
    if let Some(t) = common.threshold {
        let captions = cfg
            .captions
            .as_mut()
            .ok_or_else(|| ConfigError::Invalid("--threshold given but no captions section is configured".into()))?;
        captions.threshold = t;
    }
    if common.strategy.is_some() || common.min_votes.is_some() {
        let models = cfg.model_ids();
        let fusion = cfg.fusion.get_or_insert(FusionConfig {
            strategy: FusionStrategy::Union,
            min_votes: 1,
            model_priority: models,
        });
        if let Some(s) = common.strategy {
            fusion.strategy = s;
        }
        if let Some(m) = common.min_votes {
            fusion.min_votes = m;
        }
    }
    cfg.validate()?;
    let cfg = cfg.absolutized()?;
    let out = cfg.output_dir();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("effective_config.json"), cfg.snapshot())?;
    info!("effective config written to {}", out.join("effective_config.json").display());
    Ok(cfg)
}

fn model_list(run: &Run, requested: Vec<String>) -> Result<Vec<String>> {
    if requested.is_empty() {
        return Ok(run.config.model_ids());
    }
    for m in &requested {
        if run.config.model(m).is_none() {
            return Err(RunError::UnknownModel(m.clone()).into());
        }
    }
    Ok(requested)
}

fn print_reports(reports: &[MetricReport]) {
    let refs: Vec<&MetricReport> = reports.iter().collect();
    print!("{}", render_table(&refs));
}

/// Rescores every `fused/<strategy>.jsonl` present in the output directory.
fn eval_fused(run: &Run) -> Result<Vec<MetricReport>> {
    let dir = run.output_dir().join("fused");
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for path in files {
        let strategy = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let preds: Vec<PredictionRecord> = jsonl::read(&path)?;
        let report = run_eval(&format!("fused:{strategy}"), &preds, &run.manifest, &run.lexicon)?;
        let path = run.report_path(&format!("fused_{strategy}"));
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
        out.push(report);
    }
    Ok(out)
}

fn captions(run: &Run) -> Result<()> {
    let cfg = &run.config;
    let section = cfg
        .captions
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("no captions section is configured".into()))?;
    let list = cfg.resolve(&section.images);
    let list_dir = list.parent().map(Path::to_path_buf).unwrap_or_default();
    let refs: Vec<ImageRef> = jsonl::read(&list).map_err(|e| ConfigError::Invalid(format!("image list: {e}")))?;
    let images: Vec<PathBuf> = refs.into_iter().map(|r| list_dir.join(r.image)).collect();
    let template = |name: &str| {
        cfg.template(name)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown template `{name}`")))
    };
    let controls = cfg
        .backend(&section.backend_a)
        .map(|b| b.controls())
        .unwrap_or_default();
    let job = CaptionJob {
        backend_a: section.backend_a.clone(),
        backend_b: section.backend_b.clone(),
        judge: section.judge.clone(),
        caption_template: template(&section.caption_template)?,
        judge_template: template(&section.judge_template)?,
        controls,
        filter: cfg.filter_config().expect("captions section present"),
        concurrency: cfg.concurrency,
    };
    let result = build_caption_dataset(&images, &job, &run.registry)?;
    let dir = run.output_dir().join("captions");
    result.write(&dir)?;
    let s = &result.stats;
    println!("attempted  generated  unusable  dropped  kept");
    println!(
        "{:>9}  {:>9}  {:>8}  {:>7}  {:>4}",
        s.attempted, s.generated, s.unusable, s.dropped_below_threshold, s.kept
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.common)?;
    let run = Run::open(cfg)?;
    let out = run.output_dir();
    match cli.command {
        Command::Sample => {
            let frames = select_frames(&run);
            jsonl::write(&out.join("frames.jsonl"), &frames)?;
            println!("{} samples, frames written to {}", frames.len(), out.join("frames.jsonl").display());
        }
        Command::Ingest { tool } => {
            let manifest_path = run.config.resolve(&run.config.manifest);
            let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
            let dir = out.join("ingest");
            let (manifest, report) = ingest(&run.manifest, &base, &tool, &dir.join("frames"))?;
            manifest.write(&dir.join("manifest.jsonl"))?;
            std::fs::write(dir.join("ingest.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            println!(
                "{}: extracted {}, passed through {}",
                report.tool_version,
                report.extracted.len(),
                report.passed_through.len()
            );
        }
        Command::Captions => captions(&run)?,
        Command::Infer { models } => {
            let models = model_list(&run, models)?;
            let results = run_inference(&run, &models)?;
            println!("model  predictions  empty");
            for (model, samples) in &results {
                let empty = samples.iter().filter(|s| s.prediction.labels.label_set().is_none()).count();
                println!("{model}  {}  {empty}", samples.len());
            }
        }
        Command::Fuse => {
            let fusion = run.config.fusion.clone().ok_or(RunError::NoFusion)?;
            let report = run_fuse_eval(&run, &fusion)?;
            let mut rows = report.constituents;
            rows.push(report.fused);
            print_reports(&rows);
        }
        Command::Eval { models } => {
            let models = model_list(&run, models)?;
            let mut reports = evaluate_models(&run, &models)?;
            reports.extend(eval_fused(&run)?);
            print_reports(&reports);
        }
        Command::Report => print_reports(&load_reports(&out)?),
        Command::Run => {
            let summary = run_all(&run)?;
            let mut rows = summary.reports;
            if let Some(f) = summary.fusion {
                rows.push(f.fused);
            }
            print_reports(&rows);
        }
    }
    Ok(())
}

/// Machine-readable error kind and exit status.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    const CONFIG: (&str, u8) = ("config_error", 2);
    if err.downcast_ref::<ConfigError>().is_some() {
        return CONFIG;
    }
    if let Some(e) = err.downcast_ref::<RunError>() {
        return if e.is_config_error() { CONFIG } else { ("run_error", 1) };
    }
    if let Some(e) = err.downcast_ref::<CaptionError>() {
        return match e {
            CaptionError::Io(_) => ("io_error", 1),
            _ => CONFIG,
        };
    }
    if let Some(e) = err.downcast_ref::<IngestError>() {
        return match e {
            IngestError::ToolMissing(_) => ("tool_missing", 1),
            _ => ("ingest_error", 1),
        };
    }
    ("error", 1)
}

/// The error chain joined with `: `, skipping causes the parent already quotes.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            let summary = serde_json::json!({ "error": kind, "message": message(&err) });
            eprintln!("{summary}");
            ExitCode::from(code)
        }
    }
}

