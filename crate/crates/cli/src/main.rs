//! `csq`: run candidate set query experiments from JSON configs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csq_core::cost::{cost_model_fit, load_cost_study};
use csq_core::data::synth_blobs_with_counts;
use csq_core::experiment::{emit_metrics_csv, emit_report_json, parse_config_in};
use csq_core::{parse_config, run_experiment, ExperimentConfig, RngSeed};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "csq", version, about = "Candidate set query active learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; writes metrics.csv and report.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: the config's output_dir, else `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several variants of a base config with a shared seed.
    Sweep {
        /// JSON with `base` (a config) and `runs` (objects with a `name` and
        /// fields to override).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Correlate log2(option count) with measured annotation bits.
    Costfit {
        /// CSV with an `options,bits` header.
        #[arg(long)]
        input: PathBuf,
    },
    /// Write a Gaussian blob dataset (CSV plus `.meta.json`).
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        /// Comma-separated per-class counts; overrides --per-class.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0.3)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] csq_core::Error),
    #[error("sweep file: {0}")]
    Sweep(String),
    /// The config file itself could not be read.
    #[error("{0}")]
    ConfigFile(csq_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_config_error() => 2,
            CliError::Sweep(_) | CliError::ConfigFile(_) => 2,
            _ => 3,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, out, seed } => {
            let mut cfg = parse_config(&config).map_err(|e| match e {
                csq_core::Error::Io { .. } => CliError::ConfigFile(e),
                other => other.into(),
            })?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let dir = out
                .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            run_one(&cfg, &dir, "metrics.csv", "report.json")
        }
        Command::Sweep { config, out, seed } => sweep(&config, out, seed),
        Command::Costfit { input } => {
            let (counts, bits) = load_cost_study(&input)?;
            let fit = cost_model_fit(&counts, &bits)?;
            println!("options,log2_options,measured_bits");
            for ((c, t), m) in counts.iter().zip(&fit.theoretical_bits).zip(&fit.measured_bits) {
                println!("{c},{t:.6},{m:.6}");
            }
            println!("pearson: {:.6}", fit.pearson);
            Ok(())
        }
        Command::Synth {
            classes,
            dim,
            per_class,
            counts,
            spread,
            seed,
            out,
        } => {
            let counts = counts.unwrap_or_else(|| vec![per_class; classes]);
            if counts.len() != classes {
                return Err(csq_core::Error::Config {
                    path: "counts".into(),
                    message: format!("expected {classes} counts, got {}", counts.len()),
                }
                .into());
            }
            let ds = synth_blobs_with_counts(&counts, dim, spread, RngSeed(seed))?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(io_err(parent.display().to_string()))?;
            }
            ds.save(&out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(())
        }
    }
}

fn run_one(cfg: &ExperimentConfig, dir: &Path, csv_name: &str, json_name: &str) -> Result<(), CliError> {
    let run = run_experiment(cfg)?;
    fs::create_dir_all(dir).map_err(io_err(dir.display().to_string()))?;
    emit_metrics_csv(&run.report, dir.join(csv_name))?;
    emit_report_json(&run.report, dir.join(json_name))?;
    if let Some(last) = run.report.rows.last() {
        println!(
            "{}: round {} accuracy {:.4} relative cost {:.2}%",
            dir.join(csv_name).display(),
            last.round,
            last.accuracy,
            last.relative_cost_pct
        );
    }
    Ok(())
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn sweep_configs(text: &str, base_dir: &Path, seed: Option<u64>) -> Result<Vec<(String, ExperimentConfig)>, CliError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| CliError::Sweep(e.to_string()))?;
    let obj = doc.as_object().ok_or_else(|| CliError::Sweep("expected a JSON object".into()))?;
    if let Some(extra) = obj.keys().find(|k| *k != "base" && *k != "runs") {
        return Err(CliError::Sweep(format!("unknown field `{extra}`")));
    }
    let base = obj.get("base").ok_or_else(|| CliError::Sweep("missing `base`".into()))?;
    let runs = obj
        .get("runs")
        .and_then(Value::as_array)
        .filter(|r| !r.is_empty())
        .ok_or_else(|| CliError::Sweep("`runs` must be a non-empty array".into()))?;
    let mut names = BTreeSet::new();
    let mut out = Vec::with_capacity(runs.len());
    for (i, run) in runs.iter().enumerate() {
        let mut patch = run
            .as_object()
            .cloned()
            .ok_or_else(|| CliError::Sweep(format!("runs[{i}] is not an object")))?;
        let name = match patch.remove("name") {
            Some(Value::String(s)) => s,
            _ => return Err(CliError::Sweep(format!("runs[{i}] needs a string `name`"))),
        };
        let valid = !name.is_empty()
            && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            && name != "."
            && name != "..";
        if !valid {
            return Err(CliError::Sweep(format!("runs[{i}]: name `{name}` is not a plain file name")));
        }
        if !names.insert(name.clone()) {
            return Err(CliError::Sweep(format!("duplicate run name `{name}`")));
        }
        let mut merged = base.clone();
        merge(&mut merged, &Value::Object(patch));
        if let Some(seed) = seed {
            merged["seed"] = Value::from(seed);
        }
        let cfg = parse_config_in(&merged.to_string(), base_dir).map_err(|e| match e {
            csq_core::Error::Config { path, message } => CliError::Sweep(format!("run `{name}`: `{path}`: {message}")),
            other => other.into(),
        })?;
        out.push((name, cfg));
    }
    Ok(out)
}

fn sweep(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Sweep(format!("{}: {e}", path.display())))?;
    let configs = sweep_configs(&text, path.parent().unwrap_or(Path::new("")), seed)?;
    let dir = out.unwrap_or_else(|| PathBuf::from("out"));
    let results: Vec<Result<(), CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|(name, cfg)| {
                let dir = &dir;
                s.spawn(move || run_one(cfg, dir, &format!("{name}.csv"), &format!("{name}.json")))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    results.into_iter().collect()
}
