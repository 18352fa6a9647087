//! Simulated annotator answering candidate set queries.
//!
//! The annotator perceives one label per sample (the true label, or with
//! probability `epsilon` a uniformly random other class) and answers both
//! query stages from that perception, so a misperceiving annotator may reject
//! a set that does contain the true class.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::CandidateSet;
use crate::cost::{query_cost, CostBits};
use crate::error::{Error, Result};
use crate::rng::RngSeed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub returned_label: usize,
    pub cost: CostBits,
    /// The annotator chose "none of the above" and picked among the rest.
    pub second_stage_used: bool,
}

/// Uniform label noise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct NoiseModel {
    epsilon: f64,
}

impl TryFrom<f64> for NoiseModel {
    type Error = Error;

    fn try_from(epsilon: f64) -> Result<Self> {
        NoiseModel::new(epsilon)
    }
}

impl From<NoiseModel> for f64 {
    fn from(n: NoiseModel) -> f64 {
        n.epsilon
    }
}

impl NoiseModel {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::config("noise", format!("epsilon must lie in [0, 1), got {epsilon}")));
        }
        Ok(NoiseModel { epsilon })
    }

    pub fn epsilon(self) -> f64 {
        self.epsilon
    }
}

/// The label the annotator believes is correct.
pub fn perceive_label<R: Rng + ?Sized>(y_true: usize, classes: usize, noise: NoiseModel, rng: &mut R) -> usize {
    if noise.epsilon == 0.0 || classes < 2 {
        return y_true;
    }
    if rng.random::<f64>() < noise.epsilon {
        let other = rng.random_range(0..classes - 1);
        if other >= y_true {
            other + 1
        } else {
            other
        }
    } else {
        y_true
    }
}

/// Answers a query given the annotator's perceived label.
pub fn answer_query(perceived: usize, set: &CandidateSet, classes: usize) -> Result<QueryOutcome> {
    if set.k() == 0 {
        return Err(Error::invalid("cannot query with an empty candidate set"));
    }
    let k = set.k();
    let included = set.contains(perceived);
    let second_stage_used = !included && k < classes;
    Ok(QueryOutcome {
        returned_label: perceived,
        cost: query_cost(classes, k, !second_stage_used)?,
        second_stage_used,
    })
}

/// Annotator with a per-sample noise stream, so answers do not depend on
/// the order in which samples are queried.
#[derive(Debug, Clone, Copy)]
pub struct SimulatedAnnotator {
    pub noise: NoiseModel,
    pub seed: RngSeed,
}

impl SimulatedAnnotator {
    pub fn new(noise: NoiseModel, seed: RngSeed) -> Self {
        SimulatedAnnotator { noise, seed }
    }

    pub fn perceive(&self, sample_id: usize, y_true: usize, classes: usize) -> usize {
        let mut rng = self.seed.stream("noise", sample_id as u64);
        perceive_label(y_true, classes, self.noise, &mut rng)
    }

    pub fn query(&self, sample_id: usize, y_true: usize, set: &CandidateSet, classes: usize) -> Result<QueryOutcome> {
        answer_query(self.perceive(sample_id, y_true, classes), set, classes)
    }
}
