//! Pool scoring and batch selection.
//!
//! The cost-aware variants divide an informativeness score `g` by the
//! expected candidate-set query cost of the sample:
//!
//! ```text
//! (1 + g)^d / (log2(k + 1) + alpha* * log2(L - k))
//! ```
//!
//! with `k` the size of the candidate set the sample would receive and
//! `alpha*` the selected error rate.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::PredictiveDistribution;
use crate::conformal::CandidateSet;
use crate::cost::expected_cost;
use crate::error::{Error, Result};
use crate::rng::RngSeed;

/// One score per pool sample, aligned with pool order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite acquisition score {v}")));
        }
        Ok(ScoreVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionKind {
    Random,
    Entropy,
    /// Scores read from a `pool_id,score` CSV.
    External,
    CostRandom,
    CostEntropy,
    CostExternal,
}

impl AcquisitionKind {
    pub fn is_cost_aware(self) -> bool {
        matches!(
            self,
            AcquisitionKind::CostRandom | AcquisitionKind::CostEntropy | AcquisitionKind::CostExternal
        )
    }

    pub fn needs_external_scores(self) -> bool {
        matches!(self, AcquisitionKind::External | AcquisitionKind::CostExternal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub kind: AcquisitionKind,
    /// Exponent on `1 + g` in the cost-aware score.
    #[serde(default = "AcquisitionConfig::default_d")]
    pub d: f64,
    /// Required for the external kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_file: Option<String>,
}

impl AcquisitionConfig {
    pub const DEFAULT_D: f64 = 0.3;

    fn default_d() -> f64 {
        Self::DEFAULT_D
    }

    pub fn new(kind: AcquisitionKind) -> Self {
        AcquisitionConfig {
            kind,
            d: Self::DEFAULT_D,
            score_file: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_cost_aware() && !(self.d > 0.0 && self.d.is_finite()) {
            return Err(Error::config("acquisition.d", "must be positive"));
        }
        if self.kind.needs_external_scores() && self.score_file.is_none() {
            return Err(Error::config(
                "acquisition.score_file",
                "required for external acquisition kinds",
            ));
        }
        Ok(())
    }
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig::new(AcquisitionKind::Entropy)
    }
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy_score(row: &[f64]) -> f64 {
    -row
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

/// `(1 + g)^d` over the expected query cost of a size-`k` set.
pub fn cost_efficient_score(g: f64, k: usize, alpha_star: f64, classes: usize, d: f64) -> Result<f64> {
    if !(g >= 0.0 && g.is_finite()) {
        return Err(Error::invalid(format!("base score must be finite and >= 0, got {g}")));
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::invalid(format!("exponent d must be positive, got {d}")));
    }
    let denominator = expected_cost(classes, k, alpha_star)?;
    Ok((1.0 + g).powf(d) / denominator.bits())
}

/// Externally supplied informativeness scores keyed by dataset index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalScores(HashMap<usize, f64>);

impl ExternalScores {
    pub fn get(&self, id: usize) -> Option<f64> {
        self.0.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(usize, f64)> for ExternalScores {
    fn from_iter<T: IntoIterator<Item = (usize, f64)>>(iter: T) -> Self {
        ExternalScores(iter.into_iter().collect())
    }
}

#[derive(Debug, Deserialize)]
struct ExternalRow {
    pool_id: usize,
    score: f64,
}

/// Reads a `pool_id,score` CSV.
pub fn load_external_scores(path: impl AsRef<Path>) -> Result<ExternalScores> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut map = HashMap::new();
    for (i, row) in reader.deserialize::<ExternalRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: i + 1,
            message: e.to_string(),
        })?;
        if !row.score.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: i + 1,
                message: "non-finite score".into(),
            });
        }
        map.insert(row.pool_id, row.score);
    }
    Ok(ExternalScores(map))
}

/// Inputs to [`score_pool`] beyond the model output.
#[derive(Debug, Clone, Copy)]
pub struct PoolContext<'a> {
    /// Dataset indices of the pool rows, aligned with the probabilities.
    pub pool_ids: &'a [usize],
    pub seed: RngSeed,
    pub round: u64,
    pub external: Option<&'a ExternalScores>,
}

/// Scores every pool sample. Cost-aware kinds need the candidate sets the
/// samples would be queried with.
pub fn score_pool(
    probs: &PredictiveDistribution,
    sets: Option<&[CandidateSet]>,
    cfg: &AcquisitionConfig,
    alpha_star: f64,
    classes: usize,
    ctx: &PoolContext<'_>,
) -> Result<ScoreVector> {
    let n = ctx.pool_ids.len();
    if probs.len() != n {
        return Err(Error::invalid("pool probabilities and pool ids differ in length"));
    }
    let base: Vec<f64> = match cfg.kind {
        AcquisitionKind::Random | AcquisitionKind::CostRandom => {
            let mut rng = ctx.seed.stream("acq", ctx.round);
            (0..n).map(|_| rng.random::<f64>()).collect()
        }
        AcquisitionKind::Entropy | AcquisitionKind::CostEntropy => {
            probs.rows().map(entropy_score).collect()
        }
        AcquisitionKind::External | AcquisitionKind::CostExternal => {
            let external = ctx
                .external
                .ok_or_else(|| Error::invalid("external acquisition without a score file"))?;
            ctx.pool_ids
                .iter()
                .map(|&id| {
                    external
                        .get(id)
                        .ok_or_else(|| Error::invalid(format!("no external score for pool id {id}")))
                })
                .collect::<Result<_>>()?
        }
    };
    if !cfg.kind.is_cost_aware() {
        return ScoreVector::new(base);
    }
    let sets = sets.ok_or_else(|| Error::invalid("cost-aware acquisition requires candidate sets"))?;
    if sets.len() != n {
        return Err(Error::invalid("candidate sets and pool differ in length"));
    }
    let scores = base
        .iter()
        .zip(sets)
        .map(|(&g, set)| cost_efficient_score(g, set.k(), alpha_star, classes, cfg.d))
        .collect::<Result<Vec<_>>>()?;
    ScoreVector::new(scores)
}

/// The `budget` highest-scoring pool ids, ordered by descending score and
/// then ascending id.
pub fn select_top_b(scores: &ScoreVector, pool_ids: &[usize], budget: usize) -> Result<Vec<usize>> {
    if scores.len() != pool_ids.len() {
        return Err(Error::invalid("scores and pool ids differ in length"));
    }
    if budget > pool_ids.len() {
        return Err(Error::invalid(format!(
            "budget {budget} exceeds pool size {}",
            pool_ids.len()
        )));
    }
    let mut ranked: Vec<(f64, usize)> = scores.values().iter().copied().zip(pool_ids.iter().copied()).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(budget).map(|(_, id)| id).collect())
}
