//! The active learning round loop.
//!
//! Each round:
//! 1. scores the pool, using the candidate sets implied by the previous
//!    round's error rate and quantile for the cost-aware acquisition kinds;
//! 2. selects the `B` best samples;
//! 3. draws `n_cal` of them at random and labels them with the previous
//!    round's candidate sets (conventional queries in round 1);
//! 4. picks the error rate for this round on those calibration labels;
//! 5. labels the rest of the batch with the configured query design;
//! 6. retrains on everything labeled so far and records metrics.
//!
//! Non-CSQ designs skip calibration and query the whole batch directly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::acquisition::{
    load_external_scores, score_pool, select_top_b, AcquisitionConfig, ExternalScores, PoolContext,
};
use crate::annotator::{QueryOutcome, SimulatedAnnotator};
use crate::classifier::{
    accuracy, Learner, PredictiveDistribution, ProbabilisticModel, SoftmaxLearner,
};
use crate::conformal::{
    candidate_sets_for, conformal_scores, empirical_quantile, optimize_alpha, ranked_classes,
    AlphaGrid, CandidateSet, Quantile,
};
use crate::cost::{relative_cost, CostBits};
use crate::data::{split_indices, Dataset, IndexSplit};
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, MetricsReport, QueryDesign, RoundMetrics, ARTIFACT_VERSION};
use crate::rng::RngSeed;

/// Candidate sets for a batch under `design`. The oracle design needs the
/// true labels.
pub fn build_query_sets(
    design: QueryDesign,
    probs: &PredictiveDistribution,
    alpha_star: f64,
    quantile: Option<&Quantile>,
    y_true: Option<&[usize]>,
) -> Result<Vec<CandidateSet>> {
    let classes = probs.classes();
    match design {
        QueryDesign::Csq => candidate_sets_for(probs, alpha_star, quantile),
        QueryDesign::Conventional => Ok(probs.rows().map(CandidateSet::full).collect()),
        QueryDesign::TopK(k) => {
            if k == 0 || k > classes {
                return Err(Error::invalid(format!("top-k design needs 1 <= k <= {classes}, got {k}")));
            }
            Ok(probs.rows().map(|row| CandidateSet::top_k(row, k)).collect())
        }
        QueryDesign::Oracle => {
            let labels = y_true.ok_or_else(|| Error::invalid("oracle design requires true labels"))?;
            if labels.len() != probs.len() {
                return Err(Error::invalid("oracle labels and probabilities differ in length"));
            }
            probs
                .rows()
                .zip(labels)
                .map(|(row, &y)| {
                    let mut ranked = ranked_classes(row);
                    let m = ranked
                        .iter()
                        .position(|&c| c == y)
                        .ok_or_else(|| Error::invalid(format!("label {y} outside the label space")))?;
                    ranked.truncate(m + 1);
                    CandidateSet::new(ranked)
                })
                .collect()
        }
    }
}

/// One answered query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueryRecord {
    pub round: usize,
    pub sample_id: usize,
    pub true_label: usize,
    pub set_size: usize,
    pub gt_in_set: bool,
    /// Labeled for calibration (with the previous round's sets).
    pub calibration: bool,
    pub outcome: QueryOutcome,
}

#[derive(Debug, Clone)]
pub struct RoundState<M> {
    /// Dataset index -> label as returned by the annotator.
    pub labeled: BTreeMap<usize, usize>,
    /// Unlabeled indices, ascending.
    pub pool: Vec<usize>,
    pub model: M,
    pub prev_quantile: Option<Quantile>,
    pub prev_alpha: f64,
    pub cumulative_cost: CostBits,
    pub round_index: usize,
    pub queries: Vec<QueryRecord>,
}

/// Per-round knobs of the loop.
#[derive(Debug, Clone)]
pub struct RoundSettings {
    pub budget: usize,
    pub n_cal: usize,
    pub alpha_grid: AlphaGrid,
    pub fixed_alpha: Option<f64>,
    pub acquisition: AcquisitionConfig,
    pub design: QueryDesign,
    pub rescore_after_calibration: bool,
    pub seed: RngSeed,
}

impl RoundSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        RoundSettings {
            budget: cfg.budget,
            n_cal: cfg.n_cal.unwrap_or(0),
            alpha_grid: cfg.alpha_grid.clone(),
            fixed_alpha: cfg.fixed_alpha,
            acquisition: cfg.acquisition.clone(),
            design: cfg.design,
            rescore_after_calibration: cfg.rescore_after_calibration,
            seed: cfg.seed(),
        }
    }
}

/// A dataset, a learner and an annotator wired into the round loop.
pub struct Simulation<'a, L> {
    dataset: &'a Dataset,
    validation: Vec<usize>,
    learner: L,
    annotator: SimulatedAnnotator,
    settings: RoundSettings,
    external: Option<ExternalScores>,
    labelable: usize,
}

impl<'a, L: Learner> Simulation<'a, L> {
    pub fn new(
        dataset: &'a Dataset,
        split: &IndexSplit,
        learner: L,
        annotator: SimulatedAnnotator,
        settings: RoundSettings,
    ) -> Result<Self> {
        if split.validation.is_empty() {
            return Err(Error::invalid("validation split is empty"));
        }
        Ok(Simulation {
            dataset,
            validation: split.validation.clone(),
            learner,
            annotator,
            settings,
            external: None,
            labelable: split.initial_labeled.len() + split.pool.len(),
        })
    }

    pub fn with_external_scores(mut self, scores: ExternalScores) -> Self {
        self.external = Some(scores);
        self
    }

    fn classes(&self) -> usize {
        self.dataset.label_space().len()
    }

    /// Samples that could ever be labeled (`N` in the relative cost).
    pub fn labelable(&self) -> usize {
        self.labelable
    }

    fn query(
        &self,
        round: usize,
        ids: &[usize],
        sets: &[CandidateSet],
        calibration: bool,
    ) -> Result<Vec<QueryRecord>> {
        ids.iter()
            .zip(sets)
            .map(|(&id, set)| {
                let y = self.dataset.label(id);
                Ok(QueryRecord {
                    round,
                    sample_id: id,
                    true_label: y,
                    set_size: set.k(),
                    gt_in_set: set.contains(y),
                    calibration,
                    outcome: self.annotator.query(id, y, set, self.classes())?,
                })
            })
            .collect()
    }

    fn retrain(&self, labeled: &BTreeMap<usize, usize>) -> Result<L::Model> {
        let ids: Vec<usize> = labeled.keys().copied().collect();
        let labels: Vec<usize> = labeled.values().copied().collect();
        self.learner.fit(self.dataset, &ids, &labels)
    }

    fn metrics(
        &self,
        round: usize,
        model: &L::Model,
        cost: CostBits,
        batch: &[QueryRecord],
        alpha_star: f64,
        n_second_stage: usize,
    ) -> Result<RoundMetrics> {
        let (mean_set_size, gt_inclusion_rate) = if batch.is_empty() {
            (self.classes() as f64, 1.0)
        } else {
            let n = batch.len() as f64;
            (
                batch.iter().map(|q| q.set_size as f64).sum::<f64>() / n,
                batch.iter().filter(|q| q.gt_in_set).count() as f64 / n,
            )
        };
        Ok(RoundMetrics {
            round,
            accuracy: accuracy(model, self.dataset, &self.validation)?,
            cumulative_cost_bits: cost.bits(),
            relative_cost_pct: relative_cost(cost, self.labelable, self.classes())?,
            mean_set_size,
            gt_inclusion_rate,
            alpha_star,
            n_second_stage,
        })
    }

    /// Labels the initial set with conventional queries and trains the first
    /// model.
    pub fn initialize(&self, initial: &[usize], pool: &[usize]) -> Result<(RoundState<L::Model>, RoundMetrics)> {
        if initial.is_empty() {
            return Err(Error::invalid("initial labeled set is empty"));
        }
        let mut initial = initial.to_vec();
        initial.sort_unstable();
        let uniform = vec![0.0; self.classes()];
        let full_sets = vec![CandidateSet::full(&uniform); initial.len()];
        let queries = self.query(0, &initial, &full_sets, false)?;
        let labeled: BTreeMap<usize, usize> = queries
            .iter()
            .map(|q| (q.sample_id, q.outcome.returned_label))
            .collect();
        let cost: CostBits = queries.iter().map(|q| q.outcome.cost).sum();
        let model = self.retrain(&labeled)?;
        let second = queries.iter().filter(|q| q.outcome.second_stage_used).count();
        let metrics = self.metrics(0, &model, cost, &queries, 0.0, second)?;
        let mut pool = pool.to_vec();
        pool.sort_unstable();
        Ok((
            RoundState {
                labeled,
                pool,
                model,
                prev_quantile: None,
                prev_alpha: 0.0,
                cumulative_cost: cost,
                round_index: 0,
                queries,
            },
            metrics,
        ))
    }

    /// Sets used to estimate each pool sample's cost before selection.
    fn estimation_sets(
        &self,
        probs: &PredictiveDistribution,
        ids: &[usize],
        alpha: f64,
        quantile: Option<&Quantile>,
    ) -> Result<Option<Vec<CandidateSet>>> {
        if !self.settings.acquisition.kind.is_cost_aware() {
            return Ok(None);
        }
        let truth: Vec<usize> = ids.iter().map(|&i| self.dataset.label(i)).collect();
        build_query_sets(self.settings.design, probs, alpha, quantile, Some(&truth)).map(Some)
    }

    fn select(
        &self,
        round: usize,
        ids: &[usize],
        probs: &PredictiveDistribution,
        alpha: f64,
        quantile: Option<&Quantile>,
        budget: usize,
    ) -> Result<Vec<usize>> {
        let sets = self.estimation_sets(probs, ids, alpha, quantile)?;
        let ctx = PoolContext {
            pool_ids: ids,
            seed: self.settings.seed,
            round: round as u64,
            external: self.external.as_ref(),
        };
        let scores = score_pool(
            probs,
            sets.as_deref(),
            &self.settings.acquisition,
            alpha,
            self.classes(),
            &ctx,
        )?;
        select_top_b(&scores, ids, budget)
    }

    /// Runs one round and returns the new state with its metrics.
    pub fn run_round(&self, mut state: RoundState<L::Model>) -> Result<(RoundState<L::Model>, RoundMetrics)> {
        let s = &self.settings;
        let round = state.round_index + 1;
        if s.budget > state.pool.len() {
            return Err(Error::invalid(format!(
                "budget {} exceeds pool size {}",
                s.budget,
                state.pool.len()
            )));
        }
        let csq = s.design == QueryDesign::Csq;
        if csq && (s.n_cal == 0 || s.n_cal >= s.budget) {
            return Err(Error::invalid(format!(
                "calibration size {} must lie in 1..{}",
                s.n_cal, s.budget
            )));
        }

        let pool_probs = state.model.predict_proba(self.dataset, &state.pool);
        let position = |id: usize| state.pool.binary_search(&id).expect("selected id comes from the pool");
        let probs_of = |ids: &[usize]| pool_probs.select(&ids.iter().map(|&i| position(i)).collect::<Vec<_>>());
        let truth_of = |ids: &[usize]| ids.iter().map(|&i| self.dataset.label(i)).collect::<Vec<_>>();

        let (score_alpha, score_q) = if csq {
            (state.prev_alpha, state.prev_quantile)
        } else {
            (0.0, None)
        };
        let selected = self.select(
            round,
            &state.pool,
            &pool_probs,
            score_alpha,
            score_q.as_ref(),
            s.budget,
        )?;

        let mut records = Vec::with_capacity(s.budget);
        let (alpha_star, q_star, batch_ids) = if csq {
            let mut cal = selected.clone();
            cal.shuffle(&mut s.seed.stream("cal", round as u64));
            cal.truncate(s.n_cal);
            cal.sort_unstable();

            let cal_probs = probs_of(&cal);
            let cal_sets = candidate_sets_for(&cal_probs, state.prev_alpha, state.prev_quantile.as_ref())?;
            let cal_records = self.query(round, &cal, &cal_sets, true)?;
            let cal_labels: Vec<usize> = cal_records.iter().map(|q| q.outcome.returned_label).collect();
            records.extend(cal_records);

            let (alpha, quantile) = match s.fixed_alpha {
                Some(a) if a > 0.0 => {
                    let scores = conformal_scores(&cal_probs, &cal_labels)?;
                    (a, Some(empirical_quantile(&scores, a)?))
                }
                Some(_) => (0.0, None),
                None => {
                    let choice = optimize_alpha(&cal_probs, &cal_labels, &s.alpha_grid, self.classes())?;
                    (choice.alpha, choice.quantile)
                }
            };

            let mut rest: Vec<usize> = if s.rescore_after_calibration {
                let remaining: Vec<usize> = state
                    .pool
                    .iter()
                    .copied()
                    .filter(|id| cal.binary_search(id).is_err())
                    .collect();
                let remaining_probs = probs_of(&remaining);
                self.select(
                    round,
                    &remaining,
                    &remaining_probs,
                    alpha,
                    quantile.as_ref(),
                    s.budget - s.n_cal,
                )?
            } else {
                selected
                    .iter()
                    .copied()
                    .filter(|id| cal.binary_search(id).is_err())
                    .collect()
            };
            rest.sort_unstable();
            (alpha, quantile, rest)
        } else {
            let mut all = selected;
            all.sort_unstable();
            (0.0, None, all)
        };

        let batch_probs = probs_of(&batch_ids);
        let batch_truth = truth_of(&batch_ids);
        let sets = build_query_sets(s.design, &batch_probs, alpha_star, q_star.as_ref(), Some(&batch_truth))?;
        let batch_records = self.query(round, &batch_ids, &sets, false)?;
        let batch_start = records.len();
        records.extend(batch_records);

        for q in &records {
            state.cumulative_cost += q.outcome.cost;
            state.labeled.insert(q.sample_id, q.outcome.returned_label);
        }
        let mut annotated: Vec<usize> = records.iter().map(|q| q.sample_id).collect();
        annotated.sort_unstable();
        state.pool.retain(|id| annotated.binary_search(id).is_err());

        state.model = self.retrain(&state.labeled)?;
        let n_second = records.iter().filter(|q| q.outcome.second_stage_used).count();
        let metrics = self.metrics(
            round,
            &state.model,
            state.cumulative_cost,
            &records[batch_start..],
            alpha_star,
            n_second,
        )?;

        state.prev_alpha = alpha_star;
        state.prev_quantile = q_star;
        state.round_index = round;
        state.queries.extend(records);
        Ok((state, metrics))
    }

    /// Initializes and runs `rounds` rounds. Returns the final state and one
    /// metrics row per round, round 0 included.
    pub fn run(&self, split: &IndexSplit, rounds: usize) -> Result<(RoundState<L::Model>, Vec<RoundMetrics>)> {
        let (mut state, first) = self.initialize(&split.initial_labeled, &split.pool)?;
        let mut rows = vec![first];
        for _ in 0..rounds {
            let (next, metrics) = self.run_round(state)?;
            state = next;
            rows.push(metrics);
        }
        Ok((state, rows))
    }
}

/// Everything produced by one configured experiment.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: MetricsReport,
    pub queries: Vec<QueryRecord>,
    pub final_labeled: usize,
    pub final_pool: usize,
}

/// Loads the data, splits it and runs the configured experiment with the
/// softmax classifier.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let mut cfg = cfg.clone();
    let dataset = cfg.load_dataset()?;
    cfg.resolve_for(dataset.len())?;
    let split = split_indices(
        dataset.len(),
        cfg.initial_size.unwrap_or(cfg.budget),
        cfg.validation_size.unwrap_or(1),
        cfg.seed(),
    )?;
    let learner = SoftmaxLearner {
        config: cfg.train.clone(),
    };
    let annotator = SimulatedAnnotator::new(cfg.noise, cfg.seed());
    let mut sim = Simulation::new(&dataset, &split, learner, annotator, RoundSettings::from_config(&cfg))?;
    if let Some(path) = &cfg.acquisition.score_file {
        sim = sim.with_external_scores(load_external_scores(path)?);
    }
    let (state, rows) = sim.run(&split, cfg.rounds)?;
    Ok(ExperimentRun {
        report: MetricsReport {
            version: ARTIFACT_VERSION.to_string(),
            labelable_samples: sim.labelable(),
            config: cfg,
            rows,
        },
        final_labeled: state.labeled.len(),
        final_pool: state.pool.len(),
        queries: state.queries,
    })
}
