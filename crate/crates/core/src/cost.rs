//! Information-theoretic annotation cost.
//!
//! Picking one of `n` options costs `log2 n` bits. A candidate set query with
//! `k < L` classes first asks the annotator to pick among the `k` candidates
//! or "none of the above" (`log2(k+1)`), and only on a miss asks again among
//! the remaining `L - k` classes. A set covering all `L` classes is the
//! conventional query and costs `log2 L`.

use std::fmt;
use std::fs::File;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Annotator effort in bits.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostBits(pub f64);

impl CostBits {
    pub const ZERO: CostBits = CostBits(0.0);

    #[inline]
    pub fn bits(self) -> f64 {
        self.0
    }
}

impl Add for CostBits {
    type Output = CostBits;

    fn add(self, rhs: CostBits) -> CostBits {
        CostBits(self.0 + rhs.0)
    }
}

impl AddAssign for CostBits {
    fn add_assign(&mut self, rhs: CostBits) {
        self.0 += rhs.0;
    }
}

impl Sum for CostBits {
    fn sum<I: Iterator<Item = CostBits>>(iter: I) -> CostBits {
        CostBits(iter.map(|c| c.0).sum())
    }
}

impl fmt::Display for CostBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} bits", self.0)
    }
}

fn check_k(classes: usize, k: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::invalid(format!("L must be >= 2, got {classes}")));
    }
    if k == 0 || k > classes {
        return Err(Error::invalid(format!("set size k = {k} outside 1..={classes}")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("error rate must lie in [0, 1), got {alpha}")));
    }
    Ok(())
}

/// Cost of one query with a size-`k` candidate set.
pub fn query_cost(classes: usize, k: usize, gt_included: bool) -> Result<CostBits> {
    check_k(classes, k)?;
    let first_stage = ((k + 1) as f64).log2();
    Ok(CostBits(if k == classes {
        (classes as f64).log2()
    } else if gt_included {
        first_stage
    } else {
        first_stage + ((classes - k) as f64).log2()
    }))
}

/// Expected cost when the set misses the true class with probability `alpha`.
pub fn expected_cost(classes: usize, k: usize, alpha: f64) -> Result<CostBits> {
    check_k(classes, k)?;
    check_alpha(alpha)?;
    Ok(CostBits(if k == classes {
        (classes as f64).log2()
    } else {
        ((k + 1) as f64).log2() + alpha * ((classes - k) as f64).log2()
    }))
}

/// Sufficient condition for a size-`k` candidate set query with miss rate
/// `alpha` to be strictly cheaper than the conventional query:
/// `log2(k+1) / log2(L) < 1 - alpha`.
pub fn csq_improvement_condition(classes: usize, k: usize, alpha: f64) -> Result<bool> {
    check_k(classes, k)?;
    check_alpha(alpha)?;
    Ok(((k + 1) as f64).log2() / (classes as f64).log2() < 1.0 - alpha)
}

/// Top-`k` accuracy above which fixed-size candidate sets always pay off:
/// `log_L(k+1)`.
pub fn topk_accuracy_threshold(classes: usize, k: usize) -> Result<f64> {
    check_k(classes, k)?;
    if k == classes {
        return Err(Error::invalid("threshold is defined for k < L"));
    }
    Ok(((k + 1) as f64).ln() / (classes as f64).ln())
}

/// `total` as a percentage of labeling `n` samples conventionally.
pub fn relative_cost(total: CostBits, n: usize, classes: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("relative cost needs N >= 1"));
    }
    if classes < 2 {
        return Err(Error::invalid(format!("L must be >= 2, got {classes}")));
    }
    Ok(100.0 * total.0 / (n as f64 * (classes as f64).log2()))
}

/// Agreement between the log-cost model and measured annotation effort.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostFit {
    /// `log2` of each option count.
    pub theoretical_bits: Vec<f64>,
    pub measured_bits: Vec<f64>,
    pub pearson: f64,
}

/// Pearson correlation between `log2(option_counts)` and `measured_bits`.
pub fn cost_model_fit(option_counts: &[usize], measured_bits: &[f64]) -> Result<CostFit> {
    if option_counts.len() != measured_bits.len() {
        return Err(Error::invalid("option counts and measurements differ in length"));
    }
    if option_counts.len() < 3 {
        return Err(Error::invalid("cost fit needs at least 3 points"));
    }
    if option_counts.contains(&0) {
        return Err(Error::invalid("option counts must be positive"));
    }
    let theoretical: Vec<f64> = option_counts.iter().map(|&c| (c as f64).log2()).collect();
    let pearson = pearson(&theoretical, measured_bits)?;
    Ok(CostFit {
        theoretical_bits: theoretical,
        measured_bits: measured_bits.to_vec(),
        pearson,
    })
}

#[derive(Deserialize)]
struct StudyRow {
    options: usize,
    bits: f64,
}

/// Reads a user-study table with an `options,bits` header.
pub fn load_cost_study(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["options", "bits"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            message: format!("expected header `options,bits`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let (mut counts, mut bits) = (Vec::new(), Vec::new());
    for (i, row) in reader.deserialize::<StudyRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: i + 2,
            message: e.to_string(),
        })?;
        counts.push(row.options);
        bits.push(row.bits);
    }
    Ok((counts, bits))
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 {
        return Err(Error::ZeroVariance("option counts"));
    }
    if syy <= 0.0 {
        return Err(Error::ZeroVariance("measured bits"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn query_cost_examples() {
        assert_eq!(query_cost(16, 3, true).unwrap().bits(), 2.0);
        assert_abs_diff_eq!(query_cost(16, 3, false).unwrap().bits(), 5.700440, epsilon = 1e-6);
        assert_abs_diff_eq!(query_cost(10, 10, true).unwrap().bits(), 3.321928, epsilon = 1e-6);
        assert_eq!(query_cost(10, 10, false).unwrap(), query_cost(10, 10, true).unwrap());
        assert!(query_cost(10, 0, true).is_err());
        assert!(query_cost(10, 11, true).is_err());
        assert!(query_cost(1, 1, true).is_err());
    }

    #[test]
    fn expected_cost_examples() {
        assert_abs_diff_eq!(expected_cost(100, 3, 0.1).unwrap().bits(), 2.659991, epsilon = 1e-6);
        assert_eq!(expected_cost(4, 1, 0.0).unwrap().bits(), 1.0);
        assert_abs_diff_eq!(expected_cost(10, 10, 0.7).unwrap().bits(), 3.321928, epsilon = 1e-6);
        assert!(expected_cost(10, 3, 1.0).is_err());
        assert!(expected_cost(10, 3, -0.1).is_err());
    }

    #[test]
    fn improvement_condition_examples() {
        assert!(csq_improvement_condition(10, 1, 0.5).unwrap());
        assert!(!csq_improvement_condition(10, 1, 0.70).unwrap());
        assert!(!csq_improvement_condition(10, 9, 0.0).unwrap());
    }

    #[test]
    fn top1_accuracy_thresholds() {
        assert_abs_diff_eq!(topk_accuracy_threshold(10, 1).unwrap(), 0.30103, epsilon = 1e-5);
        assert_abs_diff_eq!(topk_accuracy_threshold(100, 1).unwrap(), 0.150515, epsilon = 1e-6);
        assert_abs_diff_eq!(topk_accuracy_threshold(1000, 1).unwrap(), 0.100343, epsilon = 1e-6);
        assert!(topk_accuracy_threshold(10, 10).is_err());
    }

    #[test]
    fn relative_cost_examples() {
        let full = CostBits(50.0 * 100f64.log2());
        assert_abs_diff_eq!(relative_cost(full, 50, 100).unwrap(), 100.0, epsilon = 1e-12);
        assert_eq!(relative_cost(CostBits::ZERO, 50, 100).unwrap(), 0.0);
        let half = relative_cost(CostBits(166_100.0), 50_000, 100).unwrap();
        assert_abs_diff_eq!(half, 50.0, epsilon = 0.01);
        assert!(relative_cost(CostBits(1.0), 0, 10).is_err());
    }

    #[test]
    fn cost_fit_examples() {
        let fit = cost_model_fit(&[4, 8, 16, 32], &[2.0, 2.6, 3.4, 4.8]).unwrap();
        assert_eq!(fit.theoretical_bits, vec![2.0, 3.0, 4.0, 5.0]);
        // 4.6 / sqrt(5 * 4.4)
        assert_abs_diff_eq!(fit.pearson, 4.6 / 22f64.sqrt(), epsilon = 1e-12);
        assert!(fit.pearson >= 0.97);

        let exact = cost_model_fit(&[4, 8, 16, 32], &[2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_abs_diff_eq!(exact.pearson, 1.0, epsilon = 1e-12);

        let err = cost_model_fit(&[4, 8, 16], &[3.0, 3.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("zero variance"));
        assert!(cost_model_fit(&[4, 8], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cost_study_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("study.csv");
        std::fs::write(&path, "options,bits\n4,2.0\n8, 2.6\n").unwrap();
        assert_eq!(load_cost_study(&path).unwrap(), (vec![4, 8], vec![2.0, 2.6]));
        std::fs::write(&path, "n,bits\n4,2.0\n").unwrap();
        assert!(load_cost_study(&path).unwrap_err().is_config_error());
        std::fs::write(&path, "options,bits\n4,x\n").unwrap();
        let err = load_cost_study(&path).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn costs_accumulate() {
        let total: CostBits = [CostBits(1.0), CostBits(2.5)].into_iter().sum();
        assert_eq!(total, CostBits(3.5));
    }
}
