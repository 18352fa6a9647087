//! Experiment configuration (JSON) and metrics reports (CSV / JSON).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionConfig;
use crate::annotator::NoiseModel;
use crate::classifier::TrainConfig;
use crate::conformal::AlphaGrid;
use crate::data::{load_dataset, synth_blobs_with_counts, Dataset};
use crate::error::{Error, Result};
use crate::rng::RngSeed;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// How candidate sets are built for the queried batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum QueryDesign {
    /// Conformal candidate sets with the optimized error rate.
    Csq,
    /// All `L` classes.
    Conventional,
    /// The `k` most probable classes.
    TopK(usize),
    /// Smallest probability-ranked prefix containing the true class.
    /// Simulation only.
    Oracle,
}

impl fmt::Display for QueryDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryDesign::Csq => f.write_str("csq"),
            QueryDesign::Conventional => f.write_str("conventional"),
            QueryDesign::TopK(k) => write!(f, "topk:{k}"),
            QueryDesign::Oracle => f.write_str("oracle"),
        }
    }
}

impl FromStr for QueryDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csq" => Ok(QueryDesign::Csq),
            "conventional" => Ok(QueryDesign::Conventional),
            "oracle" => Ok(QueryDesign::Oracle),
            other => {
                let k = other
                    .strip_prefix("topk:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| {
                        Error::config(
                            "design",
                            format!("unknown query design `{other}` (csq, conventional, topk:<k>, oracle)"),
                        )
                    })?;
                Ok(QueryDesign::TopK(k))
            }
        }
    }
}

impl TryFrom<String> for QueryDesign {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QueryDesign> for String {
    fn from(d: QueryDesign) -> String {
        d.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    /// Samples per class; ignored when `class_counts` is given.
    #[serde(default)]
    pub n_per_class: usize,
    /// Explicit per-class counts, e.g. for imbalanced pools.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_counts: Option<Vec<usize>>,
    /// Defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl BlobSpec {
    pub fn counts(&self) -> Vec<usize> {
        self.class_counts
            .clone()
            .unwrap_or_else(|| vec![self.n_per_class; self.classes])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// CSV file with a `.meta.json` sidecar.
    Path(String),
    Blobs(BlobSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    pub rounds: usize,
    pub budget: usize,
    pub seed: u64,
    /// Defaults to `budget`.
    #[serde(default)]
    pub initial_size: Option<usize>,
    /// Defaults to a tenth of the dataset.
    #[serde(default)]
    pub validation_size: Option<usize>,
    /// Calibration samples per round; defaults to `min(budget / 12, 500)`.
    #[serde(default)]
    pub n_cal: Option<usize>,
    #[serde(default)]
    pub alpha_grid: AlphaGrid,
    /// Skip the grid search and always use this error rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_alpha: Option<f64>,
    #[serde(default)]
    pub acquisition: AcquisitionConfig,
    #[serde(default = "default_design")]
    pub design: QueryDesign,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub train: TrainConfig,
    /// Re-select the non-calibration part of each batch after the error rate
    /// for the round is known.
    #[serde(default)]
    pub rescore_after_calibration: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

fn default_design() -> QueryDesign {
    QueryDesign::Csq
}

/// Parses a config from JSON text. Relative paths stay relative.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = match inner.classify() {
            serde_json::error::Category::Data => strip_position(&inner.to_string()),
            _ => inner.to_string(),
        };
        Error::config(if path.is_empty() { ".".into() } else { path }, message)
    })?;
    cfg.fill_defaults();
    cfg.validate()?;
    Ok(cfg)
}

fn strip_position(msg: &str) -> String {
    msg.split(" at line ").next().unwrap_or(msg).to_string()
}

/// Reads and validates a JSON config. Relative dataset and score-file paths
/// are resolved against the config's directory.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_in(&text, path.parent().unwrap_or(Path::new("")))
}

/// Parses config text whose relative paths are relative to `base`.
pub fn parse_config_in(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let mut cfg = parse_config_str(text)?;
    cfg.resolve_paths(base);
    cfg.check_files()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Minimal config with every optional field at its default.
    pub fn new(dataset: DatasetSpec, rounds: usize, budget: usize, seed: u64) -> Self {
        let mut cfg = ExperimentConfig {
            name: None,
            dataset,
            rounds,
            budget,
            seed,
            initial_size: None,
            validation_size: None,
            n_cal: None,
            alpha_grid: AlphaGrid::default(),
            fixed_alpha: None,
            acquisition: AcquisitionConfig::default(),
            design: QueryDesign::Csq,
            noise: NoiseModel::default(),
            train: TrainConfig::default(),
            rescore_after_calibration: false,
            output_dir: None,
        };
        cfg.fill_defaults();
        cfg
    }

    pub fn seed(&self) -> RngSeed {
        RngSeed(self.seed)
    }

    /// Fills defaults that do not depend on the dataset size.
    pub fn fill_defaults(&mut self) {
        if self.initial_size.is_none() {
            self.initial_size = Some(self.budget);
        }
        if self.n_cal.is_none() {
            self.n_cal = Some((self.budget / 12).clamp(1, 500));
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.acquisition.validate()?;
        if let DatasetSpec::Blobs(b) = &self.dataset {
            let counts = b.counts();
            if counts.len() < 2 || counts.contains(&0) {
                return Err(Error::config(
                    "dataset.blobs",
                    "need at least 2 classes with a positive sample count each",
                ));
            }
            if b.class_counts.as_ref().is_some_and(|c| c.len() != b.classes) {
                return Err(Error::config("dataset.blobs.class_counts", "length must equal `classes`"));
            }
            if b.dim == 0 {
                return Err(Error::config("dataset.blobs.dim", "must be positive"));
            }
            if !(b.spread >= 0.0 && b.spread.is_finite()) {
                return Err(Error::config("dataset.blobs.spread", "must be finite and >= 0"));
            }
        }
        if self.rounds > 0 && self.budget == 0 {
            return Err(Error::config("budget", "must be positive"));
        }
        if self.initial_size == Some(0) {
            return Err(Error::config("initial_size", "must be positive"));
        }
        if self.validation_size == Some(0) {
            return Err(Error::config("validation_size", "must be positive"));
        }
        if let Some(alpha) = self.fixed_alpha {
            if !(0.0..1.0).contains(&alpha) {
                return Err(Error::config("fixed_alpha", "must lie in [0, 1)"));
            }
        }
        if self.design == QueryDesign::Csq && self.rounds > 0 {
            let n_cal = self.n_cal.unwrap_or(0);
            if n_cal == 0 {
                return Err(Error::config("n_cal", "must be positive for the csq design"));
            }
            if n_cal >= self.budget {
                return Err(Error::config(
                    "n_cal",
                    format!("must be smaller than the budget ({})", self.budget),
                ));
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &str| -> String {
            let p = Path::new(p);
            if p.is_absolute() || base.as_os_str().is_empty() {
                p.to_string_lossy().into_owned()
            } else {
                base.join(p).to_string_lossy().into_owned()
            }
        };
        if let DatasetSpec::Path(p) = &mut self.dataset {
            *p = resolve(p);
        }
        if let Some(p) = &mut self.acquisition.score_file {
            *p = resolve(p);
        }
    }

    fn check_files(&self) -> Result<()> {
        if let DatasetSpec::Path(p) = &self.dataset {
            if !Path::new(p).is_file() {
                return Err(Error::config("dataset.path", format!("file `{p}` does not exist")));
            }
        }
        if let Some(p) = &self.acquisition.score_file {
            if !Path::new(p).is_file() {
                return Err(Error::config("acquisition.score_file", format!("file `{p}` does not exist")));
            }
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Path(p) => load_dataset(p),
            DatasetSpec::Blobs(b) => synth_blobs_with_counts(
                &b.counts(),
                b.dim,
                b.spread,
                RngSeed(b.seed.unwrap_or(self.seed)),
            ),
        }
    }

    /// Fills the dataset-dependent defaults and checks the sizes fit.
    pub fn resolve_for(&mut self, n: usize) -> Result<()> {
        self.fill_defaults();
        if self.validation_size.is_none() {
            self.validation_size = Some((n / 10).max(1));
        }
        let init = self.initial_size.unwrap_or(0);
        let val = self.validation_size.unwrap_or(0);
        let needed = init + val + self.rounds * self.budget;
        if needed > n {
            return Err(Error::config(
                "budget",
                format!(
                    "initial ({init}) + validation ({val}) + rounds x budget ({}) = {needed} exceeds dataset size {n}",
                    self.rounds * self.budget
                ),
            ));
        }
        self.validate()
    }
}

/// One row of the per-round metrics table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub accuracy: f64,
    pub cumulative_cost_bits: f64,
    pub relative_cost_pct: f64,
    pub mean_set_size: f64,
    pub gt_inclusion_rate: f64,
    pub alpha_star: f64,
    pub n_second_stage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub config: ExperimentConfig,
    /// `N` in the relative cost: samples available for labeling.
    pub labelable_samples: usize,
    pub rows: Vec<RoundMetrics>,
}

pub const METRICS_HEADER: &str =
    "round,accuracy,cum_cost_bits,relative_cost_pct,mean_set_size,gt_inclusion_rate,alpha_star,n_second_stage";

/// Metrics table as CSV text, reals at 6 decimals.
pub fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.round,
            r.accuracy,
            r.cumulative_cost_bits,
            r.relative_cost_pct,
            r.mean_set_size,
            r.gt_inclusion_rate,
            r.alpha_star,
            r.n_second_stage
        ));
    }
    out
}

pub fn emit_metrics_csv(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(metrics_csv(&report.rows).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Writes the report (config echo included) as pretty JSON.
pub fn emit_report_json(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let text = serde_json::to_string_pretty(report)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}
