//! Split conformal candidate sets.
//!
//! Calibration scores are `1 - P(y_i | x_i)`. For an error rate `alpha` the
//! quantile `Q(alpha)` is the smallest calibration score whose empirical CDF
//! value reaches `1 - alpha` (no finite-sample `(n+1)` correction), and the
//! candidate set of a sample holds every class with `P(y | x) >= 1 - Q(alpha)`.
//! `alpha = 0` denotes the conventional query over all classes.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, PredictiveDistribution};
use crate::cost::{query_cost, CostBits};
use crate::error::{Error, Result};

/// Nonconformity scores of a calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet(Vec<f64>);

impl ScoreSet {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::invalid(format!("conformal score {s} outside [0, 1]")));
        }
        Ok(ScoreSet(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `1 - probs[i][labels[i]]` for every calibration sample.
pub fn conformal_scores(probs: &PredictiveDistribution, labels: &[usize]) -> Result<ScoreSet> {
    if probs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} probability rows but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut scores = Vec::with_capacity(labels.len());
    for (row, &y) in probs.rows().zip(labels) {
        let p = *row
            .get(y)
            .ok_or_else(|| Error::invalid(format!("label {y} outside the label space")))?;
        scores.push((1.0 - p).clamp(0.0, 1.0));
    }
    ScoreSet::new(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantile {
    pub value: f64,
    pub alpha: f64,
}

/// Smallest score `s` with `#{s' <= s} / n >= 1 - alpha`.
pub fn empirical_quantile(scores: &ScoreSet, alpha: f64) -> Result<Quantile> {
    if scores.is_empty() {
        return Err(Error::invalid("empirical quantile of an empty score set"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("quantile error rate must lie in (0, 1), got {alpha}")));
    }
    let mut sorted = scores.0.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut j = 0;
    while j < sorted.len() {
        // Duplicates share one CDF value: jump to the last copy.
        let mut end = j + 1;
        while end < sorted.len() && sorted[end] == sorted[j] {
            end += 1;
        }
        if end as f64 / n >= 1.0 - alpha {
            return Ok(Quantile {
                value: sorted[j],
                alpha,
            });
        }
        j = end;
    }
    Err(Error::invalid(format!(
        "no score reaches CDF level {} (internal error)",
        1.0 - alpha
    )))
}

/// Classes shown to the annotator, most probable first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidateSet {
    classes: Vec<usize>,
}

impl CandidateSet {
    /// Builds a set from explicit classes. They must be distinct and non-empty.
    pub fn new(classes: Vec<usize>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid("candidate set must not be empty"));
        }
        let mut seen = classes.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != classes.len() {
            return Err(Error::invalid("candidate set has duplicate classes"));
        }
        Ok(CandidateSet { classes })
    }

    /// Every class, ordered by `row`.
    pub fn full(row: &[f64]) -> Self {
        CandidateSet {
            classes: ranked_classes(row),
        }
    }

    /// The `k` most probable classes of `row`.
    pub fn top_k(row: &[f64], k: usize) -> Self {
        let mut classes = ranked_classes(row);
        classes.truncate(k.max(1));
        CandidateSet { classes }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }
}

/// Class ids by descending probability, ties by ascending id.
pub fn ranked_classes(row: &[f64]) -> Vec<usize> {
    let mut classes: Vec<usize> = (0..row.len()).collect();
    classes.sort_by(|&a, &b| match row[b].total_cmp(&row[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    classes
}

/// Classes with `P(y | x) >= 1 - Q`. An empty result falls back to the
/// argmax class so every query has at least one candidate.
pub fn candidate_set(row: &[f64], q: &Quantile) -> CandidateSet {
    // Compared in score space so that a calibration sample whose score equals
    // the quantile is always covered.
    let mut classes: Vec<usize> = ranked_classes(row)
        .into_iter()
        .filter(|&c| 1.0 - row[c] <= q.value)
        .collect();
    if classes.is_empty() {
        classes.push(argmax(row));
    }
    CandidateSet { classes }
}

/// Candidate sets for every row. `alpha = 0` yields full sets and needs no
/// quantile.
pub fn candidate_sets_for(
    probs: &PredictiveDistribution,
    alpha: f64,
    quantile: Option<&Quantile>,
) -> Result<Vec<CandidateSet>> {
    if alpha == 0.0 {
        return Ok(probs.rows().map(CandidateSet::full).collect());
    }
    let q = quantile.ok_or_else(|| {
        Error::invalid(format!("error rate {alpha} > 0 requires a calibrated quantile"))
    })?;
    Ok(probs.rows().map(|row| candidate_set(row, q)).collect())
}

/// Fraction of sets containing their label.
pub fn inclusion_rate(sets: &[CandidateSet], labels: &[usize]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::invalid("inclusion rate of an empty set list"));
    }
    if sets.len() != labels.len() {
        return Err(Error::invalid("sets and labels differ in length"));
    }
    let hits = sets.iter().zip(labels).filter(|(s, &y)| s.contains(y)).count();
    Ok(hits as f64 / sets.len() as f64)
}

/// Candidate error rates searched when optimizing the query cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AlphaGrid(Vec<f64>);

impl AlphaGrid {
    /// Sorts the values; rejects duplicates, values outside `[0, 1)` and
    /// grids without `0`.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..1.0).contains(*v)) {
            return Err(Error::config("alpha_grid", format!("value {v} outside [0, 1)")));
        }
        values.sort_by(f64::total_cmp);
        if values.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("alpha_grid", "values must be distinct"));
        }
        if values.first() != Some(&0.0) {
            return Err(Error::config("alpha_grid", "grid must contain 0"));
        }
        Ok(AlphaGrid(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl Default for AlphaGrid {
    /// `0.00, 0.01, ..., 0.99`.
    fn default() -> Self {
        AlphaGrid((0..100).map(|i| i as f64 / 100.0).collect())
    }
}

impl TryFrom<Vec<f64>> for AlphaGrid {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        AlphaGrid::new(values)
    }
}

impl From<AlphaGrid> for Vec<f64> {
    fn from(grid: AlphaGrid) -> Self {
        grid.0
    }
}

/// Result of the error-rate search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaChoice {
    pub alpha: f64,
    /// `None` when `alpha = 0`.
    pub quantile: Option<Quantile>,
    pub total_cost: CostBits,
}

/// Sum of per-query costs in ascending order, so the total does not depend
/// on the order of the calibration samples.
pub fn canonical_total(mut costs: Vec<f64>) -> CostBits {
    costs.sort_by(f64::total_cmp);
    CostBits(costs.into_iter().sum())
}

/// Picks the grid error rate minimizing the total query cost over the
/// calibration set, with the quantile computed on that same set. Ties go to
/// the smaller rate.
pub fn optimize_alpha(
    cal_probs: &PredictiveDistribution,
    cal_labels: &[usize],
    grid: &AlphaGrid,
    classes: usize,
) -> Result<AlphaChoice> {
    if cal_labels.is_empty() {
        return Err(Error::invalid("calibration set is empty"));
    }
    if cal_probs.classes() != classes {
        return Err(Error::invalid("calibration probabilities do not match L"));
    }
    let scores = conformal_scores(cal_probs, cal_labels)?;
    let mut best: Option<AlphaChoice> = None;
    for &alpha in grid.values() {
        let quantile = if alpha > 0.0 {
            Some(empirical_quantile(&scores, alpha)?)
        } else {
            None
        };
        let sets = candidate_sets_for(cal_probs, alpha, quantile.as_ref())?;
        let costs = sets
            .iter()
            .zip(cal_labels)
            .map(|(s, &y)| query_cost(classes, s.k(), s.contains(y)).map(CostBits::bits))
            .collect::<Result<Vec<_>>>()?;
        let total_cost = canonical_total(costs);
        if best.is_none_or(|b| total_cost < b.total_cost) {
            best = Some(AlphaChoice {
                alpha,
                quantile,
                total_cost,
            });
        }
    }
    best.ok_or_else(|| Error::invalid("empty alpha grid"))
}
