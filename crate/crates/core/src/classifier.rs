//! Probabilistic classifiers.
//!
//! Everything downstream consumes only per-sample class probabilities, so the
//! engine is written against [`Learner`] / [`ProbabilisticModel`]. The built-in
//! implementation is multinomial softmax regression on standardized features,
//! trained by mini-batch gradient descent from an all-zero initialization.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelSpace};
use crate::error::{Error, Result};
use crate::rng::RngSeed;

/// Row-major `rows x L` matrix of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    classes: usize,
    data: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn new(classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || !data.len().is_multiple_of(classes) {
            return Err(Error::invalid(format!(
                "probability buffer of length {} is not a multiple of {classes}",
                data.len()
            )));
        }
        Ok(PredictiveDistribution { classes, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::invalid("probability rows have unequal lengths"));
        }
        Self::new(classes, rows.concat())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.classes)
    }

    /// Rows at the given positions, in that order.
    pub fn select(&self, positions: &[usize]) -> PredictiveDistribution {
        let mut data = Vec::with_capacity(positions.len() * self.classes);
        for &p in positions {
            data.extend_from_slice(self.row(p));
        }
        PredictiveDistribution {
            classes: self.classes,
            data,
        }
    }

    pub fn concat(parts: &[PredictiveDistribution]) -> Result<PredictiveDistribution> {
        let classes = parts.first().map_or(1, |p| p.classes);
        if parts.iter().any(|p| p.classes != classes) {
            return Err(Error::invalid("cannot concatenate distributions over different label spaces"));
        }
        Ok(PredictiveDistribution {
            classes,
            data: parts.iter().flat_map(|p| p.data.iter().copied()).collect(),
        })
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = i;
        }
    }
    best
}

pub trait ProbabilisticModel {
    fn label_space(&self) -> LabelSpace;

    /// One probability row per index, in the order given.
    fn predict_proba(&self, dataset: &Dataset, indices: &[usize]) -> PredictiveDistribution;
}

/// Something that can fit a [`ProbabilisticModel`] to labeled samples.
pub trait Learner {
    type Model: ProbabilisticModel;

    /// `labels[i]` is the (possibly noisy) annotation for `dataset` row
    /// `indices[i]`.
    fn fit(&self, dataset: &Dataset, indices: &[usize], labels: &[usize]) -> Result<Self::Model>;
}

/// Fraction of `indices` whose argmax prediction equals the dataset label.
pub fn accuracy<M: ProbabilisticModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("accuracy over an empty index list"));
    }
    let probs = model.predict_proba(dataset, indices);
    let hits = probs
        .rows()
        .zip(indices)
        .filter(|(row, &i)| argmax(row) == dataset.label(i))
        .count();
    Ok(hits as f64 / indices.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 0.1,
            l2_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive and finite"));
        }
        if !(self.l2_decay >= 0.0 && self.l2_decay.is_finite()) {
            return Err(Error::config("train.l2_decay", "must be >= 0"));
        }
        Ok(())
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    /// `L x d`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub label_space: LabelSpace,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl SoftmaxModel {
    /// All-zero parameters with identity standardization.
    pub fn zeros(label_space: LabelSpace, dim: usize) -> Self {
        SoftmaxModel {
            weights: vec![0.0; label_space.len() * dim],
            bias: vec![0.0; label_space.len()],
            label_space,
            feature_mean: vec![0.0; dim],
            feature_std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.feature_mean.len()
    }

    fn standardize_into(&self, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = (x[j] - self.feature_mean[j]) / self.feature_std[j];
        }
    }

    /// Class probabilities for a raw feature row.
    pub fn proba_row(&self, x: &[f64], out: &mut [f64]) {
        let mut z = vec![0.0; self.dim()];
        self.standardize_into(x, &mut z);
        softmax_logits(&self.weights, &self.bias, &z, out);
    }
}

impl ProbabilisticModel for SoftmaxModel {
    fn label_space(&self) -> LabelSpace {
        self.label_space
    }

    fn predict_proba(&self, dataset: &Dataset, indices: &[usize]) -> PredictiveDistribution {
        let classes = self.label_space.len();
        let mut data = vec![0.0; indices.len() * classes];
        for (out, &i) in data.chunks_exact_mut(classes).zip(indices) {
            self.proba_row(dataset.row(i), out);
        }
        PredictiveDistribution { classes, data }
    }
}

/// Writes `softmax(W z + b)` into `out`.
fn softmax_logits(weights: &[f64], bias: &[f64], z: &[f64], out: &mut [f64]) {
    let dim = z.len();
    for (c, o) in out.iter_mut().enumerate() {
        let w = &weights[c * dim..(c + 1) * dim];
        *o = bias[c] + w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Loss and gradient of mean cross-entropy plus `l2/2 * ||W||^2` over a batch
/// of already standardized rows. The bias is not regularized.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn loss_and_gradient(
    weights: &[f64],
    bias: &[f64],
    rows: &[&[f64]],
    labels: &[usize],
    l2_decay: f64,
) -> LossGradient {
    let classes = bias.len();
    let dim = weights.len() / classes;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = vec![0.0; classes];
    let mut probs = vec![0.0; classes];
    let mut loss = 0.0;
    let scale = 1.0 / rows.len().max(1) as f64;
    for (z, &y) in rows.iter().zip(labels) {
        softmax_logits(weights, bias, z, &mut probs);
        loss -= probs[y].max(f64::MIN_POSITIVE).ln();
        for c in 0..classes {
            let delta = (probs[c] - if c == y { 1.0 } else { 0.0 }) * scale;
            grad_b[c] += delta;
            for (g, x) in grad_w[c * dim..(c + 1) * dim].iter_mut().zip(z.iter()) {
                *g += delta * x;
            }
        }
    }
    loss *= scale;
    loss += 0.5 * l2_decay * weights.iter().map(|w| w * w).sum::<f64>();
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g += l2_decay * w;
    }
    LossGradient {
        loss,
        weights: grad_w,
        bias: grad_b,
    }
}

/// Per-column mean and standard deviation over `indices`; zero deviations are
/// replaced by 1.
fn feature_stats(dataset: &Dataset, indices: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let dim = dataset.dim();
    let n = indices.len() as f64;
    let mut mean = vec![0.0; dim];
    for &i in indices {
        for (m, x) in mean.iter_mut().zip(dataset.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for &i in indices {
        for ((v, x), m) in var.iter_mut().zip(dataset.row(i)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Trains on `labeled` using the dataset's own labels.
pub fn train(dataset: &Dataset, labeled: &[usize], cfg: &TrainConfig) -> Result<SoftmaxModel> {
    let labels: Vec<usize> = labeled.iter().map(|&i| dataset.label(i)).collect();
    train_with_labels(dataset, labeled, &labels, cfg)
}

/// Trains on `labeled` with externally supplied labels (e.g. annotator
/// output, which may be noisy).
pub fn train_with_labels(
    dataset: &Dataset,
    labeled: &[usize],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<SoftmaxModel> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::invalid("cannot train on an empty labeled set"));
    }
    if labeled.len() != labels.len() {
        return Err(Error::invalid("labeled indices and labels differ in length"));
    }
    if let Some(&i) = labeled.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::invalid(format!("labeled index {i} out of range")));
    }
    let label_space = dataset.label_space();
    if let Some(&l) = labels.iter().find(|&&l| !label_space.contains(l)) {
        return Err(Error::invalid(format!("training label {l} out of range")));
    }

    let dim = dataset.dim();
    let (mean, std) = feature_stats(dataset, labeled);
    let mut model = SoftmaxModel {
        feature_mean: mean,
        feature_std: std,
        ..SoftmaxModel::zeros(label_space, dim)
    };

    let standardized: Vec<Vec<f64>> = labeled
        .iter()
        .map(|&i| {
            let mut z = vec![0.0; dim];
            model.standardize_into(dataset.row(i), &mut z);
            z
        })
        .collect();

    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut rng = RngSeed(cfg.seed).stream("train", 0);
    let mut batch_rows: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch_rows.clear();
            batch_labels.clear();
            for &k in chunk {
                batch_rows.push(&standardized[k]);
                batch_labels.push(labels[k]);
            }
            let g = loss_and_gradient(
                &model.weights,
                &model.bias,
                &batch_rows,
                &batch_labels,
                cfg.l2_decay,
            );
            for (w, gw) in model.weights.iter_mut().zip(&g.weights) {
                *w -= cfg.learning_rate * gw;
            }
            for (b, gb) in model.bias.iter_mut().zip(&g.bias) {
                *b -= cfg.learning_rate * gb;
            }
        }
    }
    Ok(model)
}

/// [`Learner`] backed by [`train_with_labels`].
#[derive(Debug, Clone, Default)]
pub struct SoftmaxLearner {
    pub config: TrainConfig,
}

impl Learner for SoftmaxLearner {
    type Model = SoftmaxModel;

    fn fit(&self, dataset: &Dataset, indices: &[usize], labels: &[usize]) -> Result<SoftmaxModel> {
        train_with_labels(dataset, indices, labels, &self.config)
    }
}

/// Precomputed probabilities for every dataset row. Fitting is a no-op, so
/// it doubles as a [`Learner`] whose model never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    probs: PredictiveDistribution,
    label_space: LabelSpace,
}

impl FrozenModel {
    /// `probs` must hold one row per dataset sample.
    pub fn new(probs: PredictiveDistribution) -> Result<Self> {
        let label_space = LabelSpace::new(probs.classes())?;
        Ok(FrozenModel { probs, label_space })
    }
}

impl ProbabilisticModel for FrozenModel {
    fn label_space(&self) -> LabelSpace {
        self.label_space
    }

    fn predict_proba(&self, _dataset: &Dataset, indices: &[usize]) -> PredictiveDistribution {
        self.probs.select(indices)
    }
}

impl Learner for FrozenModel {
    type Model = FrozenModel;

    fn fit(&self, dataset: &Dataset, _indices: &[usize], _labels: &[usize]) -> Result<FrozenModel> {
        if self.probs.len() != dataset.len() {
            return Err(Error::invalid("frozen probabilities do not cover the dataset"));
        }
        Ok(self.clone())
    }
}

/// Full-batch objective of a model over `labeled`, on its own standardization.
pub fn training_loss(model: &SoftmaxModel, dataset: &Dataset, labeled: &[usize], l2_decay: f64) -> f64 {
    let rows: Vec<Vec<f64>> = labeled
        .iter()
        .map(|&i| {
            let mut z = vec![0.0; model.dim()];
            model.standardize_into(dataset.row(i), &mut z);
            z
        })
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = labeled.iter().map(|&i| dataset.label(i)).collect();
    loss_and_gradient(&model.weights, &model.bias, &refs, &labels, l2_decay).loss
}
