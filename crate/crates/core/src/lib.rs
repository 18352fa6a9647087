//! Cost-efficient active learning with candidate set queries.
//!
//! Instead of asking an annotator to pick a label among all `L` classes, a
//! candidate set query shows a short list of likely classes (built with split
//! conformal prediction) plus a "none of the above" escape. This crate holds
//! the pieces needed to simulate that workflow end to end:
//!
//! - [`cost`]: the `log2`-of-options annotation cost model.
//! - [`conformal`]: calibration scores, quantiles, candidate sets and the
//!   error-rate search that minimizes calibration cost.
//! - [`acquisition`]: entropy / random scoring and the cost-aware wrapper.
//! - [`annotator`]: a simulated, optionally noisy, annotator.
//! - [`engine`]: the round loop and metric collection.
//! - [`classifier`]: softmax regression behind a small model trait.
//! - [`data`], [`experiment`], [`rng`]: datasets, configs/reports and seeded
//!   random streams.

pub mod acquisition;
pub mod annotator;
pub mod classifier;
pub mod conformal;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod rng;

pub use acquisition::{AcquisitionConfig, AcquisitionKind, ScoreVector};
pub use annotator::{NoiseModel, QueryOutcome, SimulatedAnnotator};
pub use classifier::{
    FrozenModel, Learner, PredictiveDistribution, ProbabilisticModel, SoftmaxLearner, SoftmaxModel,
    TrainConfig,
};
pub use conformal::{AlphaChoice, AlphaGrid, CandidateSet, Quantile, ScoreSet};
pub use cost::CostBits;
pub use data::{Dataset, IndexSplit, LabelSpace};
pub use engine::{run_experiment, ExperimentRun, QueryRecord, RoundSettings, RoundState, Simulation};
pub use error::{Error, Result};
pub use experiment::{
    parse_config, ExperimentConfig, MetricsReport, QueryDesign, RoundMetrics,
};
pub use rng::RngSeed;
