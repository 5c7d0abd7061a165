//! Command-line entry points.
//!
//! Subcommands:
//!
//! - `gen`       generate a synthetic dataset plus a metadata sidecar
//! - `stratify`  split a dataset into low/medium/high uncertainty files
//! - `hadola`    run the full selection/self-labeling pipeline
//! - `sft`       cross-entropy baseline on a labeled fraction
//! - `al`        least-confidence selection baseline
//! - `eval`      score a checkpoint against a dataset
//!
//! Exit codes: 0 ok, 2 usage or config error, 3 training divergence. All
//! output files are written atomically (temp file, then rename). Configs are
//! echoed into the outputs so every result file is self-describing.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::annotations::{read_dataset_path, stratify, write_dataset, AnnotatedSample, HuLevel};
use crate::error::{HadolaError, Result};
use crate::metrics::{evaluate_with_temperature, EvalReport};
use crate::model::SurrogateModel;
use crate::pipeline::{
    audit_to_jsonl, baseline_active_learning, baseline_sft, run, PipelineConfig,
};
use crate::synth::{generate_with_meta, SynthConfig};

#[derive(Parser, Debug)]
#[command(
    name = "hadola",
    version,
    about = "human-uncertainty-aware data selection and labeling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset (JSONL) plus a `.meta.json` sidecar.
    Gen {
        /// JSON file holding the generator configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset into low.jsonl / medium.jsonl / high.jsonl plus a
    /// counts summary.
    Stratify {
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline; writes a checkpoint, a history file, and
    /// optionally a per-sample audit log.
    Hadola {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out evaluation dataset; defaults to evaluating on `--data`.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Write per-sample decisions to audit.jsonl.
        #[arg(long)]
        audit: bool,
        /// Record per-round wall time (breaks byte-reproducibility of the
        /// history file).
        #[arg(long)]
        timing: bool,
    },
    /// Cross-entropy baseline on a labeled fraction of the data.
    Sft {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fraction: f64,
        /// Restrict training to one HU stratum.
        #[arg(long)]
        stratum: Option<HuLevel>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Least-confidence selection baseline under the pipeline budget.
    Al {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes report JSON and CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Softmax temperature applied to the restricted logits.
        #[arg(long)]
        temp: Option<f64>,
        /// Output directory; without it the report prints to stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl clap::builder::ValueParserFactory for HuLevel {
    type Parser = clap::builder::ValueParser;

    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| {
            s.parse::<HuLevel>()
                .map_err(|e| clap::Error::raw(clap::error::ErrorKind::InvalidValue, e.to_string()))
        })
    }
}

/// Write via a temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp-partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| HadolaError::ConfigError(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Vec<AnnotatedSample>> {
    let samples = read_dataset_path(path)?;
    if samples.is_empty() {
        return Err(HadolaError::EmptyDataset);
    }
    Ok(samples)
}

fn load_eval(primary: &[AnnotatedSample], eval: &Option<PathBuf>) -> Result<Vec<AnnotatedSample>> {
    match eval {
        Some(path) => load_dataset(path),
        None => Ok(primary.to_vec()),
    }
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_atomic(
        &dir.join("eval.json"),
        serde_json::to_string_pretty(report)?.as_bytes(),
    )?;
    write_atomic(&dir.join("eval.csv"), report.to_csv().as_bytes())
}

fn cmd_gen(config_path: &Path, out: &Path) -> Result<()> {
    let config: SynthConfig = read_json_config(config_path)?;
    let (samples, meta) = generate_with_meta(&config)?;
    let mut buf = Vec::new();
    write_dataset(&mut buf, &samples)?;
    write_atomic(out, &buf)?;
    let meta_path = sidecar_path(out, "meta.json");
    write_atomic(&meta_path, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    println!(
        "wrote {} samples to {} (strata {}/{}/{})",
        samples.len(),
        out.display(),
        meta.realized.low,
        meta.realized.medium,
        meta.realized.high
    );
    Ok(())
}

fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".");
    name.push(suffix);
    out.with_file_name(name)
}

fn cmd_stratify(data: &Path, out_dir: &Path) -> Result<()> {
    let samples = load_dataset(data)?;
    let strata = stratify(&samples);
    std::fs::create_dir_all(out_dir)?;
    for (name, indices) in [
        ("low", &strata.low),
        ("medium", &strata.medium),
        ("high", &strata.high),
    ] {
        let subset: Vec<AnnotatedSample> = indices.iter().map(|&i| samples[i].clone()).collect();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &subset)?;
        write_atomic(&out_dir.join(format!("{name}.jsonl")), &buf)?;
    }
    #[derive(Serialize)]
    struct Counts {
        low: usize,
        medium: usize,
        high: usize,
        total: usize,
    }
    let counts = Counts {
        low: strata.low.len(),
        medium: strata.medium.len(),
        high: strata.high.len(),
        total: samples.len(),
    };
    write_atomic(
        &out_dir.join("counts.json"),
        serde_json::to_string_pretty(&counts)?.as_bytes(),
    )?;
    println!(
        "stratified {} samples: {} low, {} medium, {} high",
        counts.total, counts.low, counts.medium, counts.high
    );
    Ok(())
}

fn cmd_hadola(
    data: &Path,
    config_path: &Path,
    out_dir: &Path,
    eval: &Option<PathBuf>,
    audit: bool,
    timing: bool,
) -> Result<()> {
    let samples = load_dataset(data)?;
    let eval_set = load_eval(&samples, eval)?;
    let mut config: PipelineConfig = read_json_config(config_path)?;
    config.audit |= audit;
    config.timing |= timing;
    config.validate()?;

    let output = run(&samples, &eval_set, &config)?;
    std::fs::create_dir_all(out_dir)?;
    output.model.save_checkpoint(&out_dir.join("model.json"))?;
    write_atomic(
        &out_dir.join("history.json"),
        output.history.to_json()?.as_bytes(),
    )?;
    if config.audit {
        write_atomic(
            &out_dir.join("audit.jsonl"),
            audit_to_jsonl(&output.audit)?.as_bytes(),
        )?;
    }
    let final_eval = output.history.final_eval();
    println!(
        "finished {} rounds: hu_acc {:.4}, kl {:.4} over {} eval samples",
        output.history.rounds.len(),
        final_eval.hu_acc_mean,
        final_eval.kl_mean,
        final_eval.n
    );
    Ok(())
}

fn cmd_sft(
    data: &Path,
    config_path: &Path,
    fraction: f64,
    stratum: Option<HuLevel>,
    out_dir: &Path,
    eval: &Option<PathBuf>,
) -> Result<()> {
    let samples = load_dataset(data)?;
    let eval_set = load_eval(&samples, eval)?;
    let config: PipelineConfig = read_json_config(config_path)?;
    let (model, report) = baseline_sft(&samples, &eval_set, &config, fraction, stratum)?;
    std::fs::create_dir_all(out_dir)?;
    model.save_checkpoint(&out_dir.join("model.json"))?;
    write_report(out_dir, &report)?;
    println!(
        "sft baseline: hu_acc {:.4}, kl {:.4}",
        report.hu_acc_mean, report.kl_mean
    );
    Ok(())
}

fn cmd_al(data: &Path, config_path: &Path, out_dir: &Path, eval: &Option<PathBuf>) -> Result<()> {
    let samples = load_dataset(data)?;
    let eval_set = load_eval(&samples, eval)?;
    let config: PipelineConfig = read_json_config(config_path)?;
    let (model, report) = baseline_active_learning(&samples, &eval_set, &config)?;
    std::fs::create_dir_all(out_dir)?;
    model.save_checkpoint(&out_dir.join("model.json"))?;
    write_report(out_dir, &report)?;
    println!(
        "al baseline: hu_acc {:.4}, kl {:.4}",
        report.hu_acc_mean, report.kl_mean
    );
    Ok(())
}

fn cmd_eval(
    model_path: &Path,
    data: &Path,
    temp: Option<f64>,
    out_dir: &Option<PathBuf>,
) -> Result<()> {
    let model = SurrogateModel::load_checkpoint(model_path)?;
    let samples = load_dataset(data)?;
    let report = evaluate_with_temperature(&model, &samples, temp.unwrap_or(1.0))?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_report(dir, &report)?;
    }
    Ok(())
}

/// Dispatch a parsed command; the caller maps errors to exit codes.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out } => cmd_gen(&config, &out),
        Command::Stratify { data, out } => cmd_stratify(&data, &out),
        Command::Hadola {
            data,
            config,
            out,
            eval,
            audit,
            timing,
        } => cmd_hadola(&data, &config, &out, &eval, audit, timing),
        Command::Sft {
            data,
            config,
            fraction,
            stratum,
            out,
            eval,
        } => cmd_sft(&data, &config, fraction, stratum, &out, &eval),
        Command::Al {
            data,
            config,
            out,
            eval,
        } => cmd_al(&data, &config, &out, &eval),
        Command::Eval {
            model,
            data,
            temp,
            out,
        } => cmd_eval(&model, &data, temp, &out),
    }
}

/// Exit code for an error: 3 for training divergence, 2 otherwise.
pub fn exit_code(err: &HadolaError) -> i32 {
    match err {
        HadolaError::Diverged { .. } => 3,
        _ => 2,
    }
}

/// Honor the `HADOLA_THREADS` worker cap; the default is machine
/// parallelism.
pub fn init_thread_pool() {
    if let Ok(value) = std::env::var("HADOLA_THREADS") {
        if let Ok(n) = value.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}
