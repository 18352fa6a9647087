//! Datasets, index splits and the synthetic blob generator.
//!
//! On disk a dataset is a pair of files: `<name>.csv` with columns
//! `f0..f{d-1},label` and a sidecar `<name>.meta.json` holding
//! `{ "n": .., "d": .., "L": .. }`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngSeed;

/// Number of classes `L`. Class ids are `0..L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct LabelSpace(usize);

// Never empty: at least two classes.
#[allow(clippy::len_without_is_empty)]
impl LabelSpace {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!(
                "label space needs at least 2 classes, got {classes}"
            )));
        }
        Ok(LabelSpace(classes))
    }

    #[inline]
    pub fn len(self) -> usize {
        self.0
    }

    /// `log2 L`, the price of a conventional query.
    pub fn full_query_bits(self) -> f64 {
        (self.0 as f64).log2()
    }

    pub fn contains(self, class: usize) -> bool {
        class < self.0
    }
}

impl TryFrom<usize> for LabelSpace {
    type Error = Error;

    fn try_from(value: usize) -> Result<Self> {
        LabelSpace::new(value)
    }
}

impl From<LabelSpace> for usize {
    fn from(value: LabelSpace) -> usize {
        value.0
    }
}

/// Feature matrix (row-major, `n x d`) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    label_space: LabelSpace,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        label_space: LabelSpace,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "feature buffer has {} values, expected {} rows x {} columns",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some((row, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| !label_space.contains(l))
        {
            return Err(Error::LabelOutOfRange {
                row: row + 1,
                label,
                classes: label_space.len(),
            });
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            label_space,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn label_space(&self) -> LabelSpace {
        self.label_space
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Per-class sample counts.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.label_space.len()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Copy with every feature multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Dataset {
        Dataset {
            features: self.features.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Writes `<stem>.csv` and `<stem>.meta.json` next to each other.
    /// `path` is the CSV path.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::with_capacity(self.features.len() * 12);
        for j in 0..self.dim {
            out.push_str(&format!("f{j},"));
        }
        out.push_str("label\n");
        for i in 0..self.len() {
            for v in self.row(i) {
                // `{}` prints the shortest representation that round-trips.
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", self.labels[i]));
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes())
            .map_err(|e| Error::io(path, e))?;

        let meta = DatasetMeta {
            n: self.len(),
            d: self.dim,
            classes: self.label_space.len(),
        };
        let meta_path = meta_path_for(path);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
            .map_err(|e| Error::io(meta_path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    n: usize,
    d: usize,
    #[serde(rename = "L")]
    classes: usize,
}

/// `data/blobs.csv` -> `data/blobs.meta.json`.
pub fn meta_path_for(csv_path: &Path) -> PathBuf {
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.meta.json"))
}

/// Reads a dataset CSV and its sidecar metadata.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let meta_path = meta_path_for(path);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        row: 0,
        message: e.to_string(),
    })?;
    let label_space = LabelSpace::new(meta.classes).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        row: 0,
        message: e.to_string(),
    })?;

    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };

    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header = reader.headers()?.clone();
    let width = meta.d + 1;
    if header.len() != width {
        return Err(parse_err(
            0,
            format!("header has {} columns, expected {width}", header.len()),
        ));
    }
    if header.get(meta.d) != Some("label") {
        return Err(parse_err(0, "last column must be `label`".into()));
    }

    let mut features = Vec::with_capacity(meta.n * meta.d);
    let mut labels = Vec::with_capacity(meta.n);
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() != width {
            return Err(parse_err(
                row,
                format!("inconsistent column count: {} (expected {width})", record.len()),
            ));
        }
        for field in record.iter().take(meta.d) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(row, format!("malformed feature value `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(row, format!("non-finite feature value `{field}`")));
            }
            features.push(v);
        }
        let field = &record[meta.d];
        let label: usize = field
            .parse()
            .map_err(|_| parse_err(row, format!("non-integer label `{field}`")))?;
        if !label_space.contains(label) {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: label_space.len(),
            });
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels.len() != meta.n {
        return Err(parse_err(
            labels.len(),
            format!("found {} rows but metadata declares n = {}", labels.len(), meta.n),
        ));
    }
    Dataset::new(features, meta.d, labels, label_space)
}

/// Disjoint index sets over a dataset. Each list is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSplit {
    pub initial_labeled: Vec<usize>,
    pub pool: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Uniformly random split of `0..n` into an initial labeled set, a
/// validation set and the remaining unlabeled pool.
pub fn split_indices(n: usize, init_size: usize, val_size: usize, seed: RngSeed) -> Result<IndexSplit> {
    if init_size
        .checked_add(val_size)
        .is_none_or(|total| total > n)
    {
        return Err(Error::invalid(format!(
            "initial ({init_size}) + validation ({val_size}) exceeds dataset size {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.stream("split", 0));
    let mut initial_labeled = order[..init_size].to_vec();
    let mut validation = order[init_size..init_size + val_size].to_vec();
    let mut pool = order[init_size + val_size..].to_vec();
    initial_labeled.sort_unstable();
    validation.sort_unstable();
    pool.sort_unstable();
    Ok(IndexSplit {
        initial_labeled,
        pool,
        validation,
    })
}

/// Mean of class `class` on the unit lattice `{0..m-1}^d`, where `m` is the
/// smallest base with `m^d >= L`. Coordinates are the base-`m` digits of the
/// class id, least significant first.
pub fn lattice_mean(class: usize, classes: usize, dim: usize) -> Vec<f64> {
    let mut base = 2usize;
    while (base as f64).powi(dim.min(64) as i32) < classes as f64 {
        base += 1;
    }
    let mut rest = class;
    (0..dim)
        .map(|_| {
            let digit = rest % base;
            rest /= base;
            digit as f64
        })
        .collect()
}

/// `L` isotropic Gaussian clusters with `n_per_class` points each.
pub fn synth_blobs(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    spread: f64,
    seed: RngSeed,
) -> Result<Dataset> {
    synth_blobs_with_counts(&vec![n_per_class; classes], dim, spread, seed)
}

/// Like [`synth_blobs`] with an explicit sample count per class, for
/// imbalanced pools.
pub fn synth_blobs_with_counts(
    counts: &[usize],
    dim: usize,
    spread: f64,
    seed: RngSeed,
) -> Result<Dataset> {
    let label_space = LabelSpace::new(counts.len())?;
    if dim == 0 || counts.contains(&0) {
        return Err(Error::invalid("blob counts and dimension must be positive"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!("spread must be finite and >= 0, got {spread}")));
    }
    let total: usize = counts.iter().sum();
    let mut rng = seed.stream("blobs", 0);
    let mut features = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (class, &count) in counts.iter().enumerate() {
        let mean = lattice_mean(class, counts.len(), dim);
        for _ in 0..count {
            for &m in &mean {
                let z: f64 = rng.sample(StandardNormal);
                features.push(m + spread * z);
            }
            labels.push(class);
        }
    }
    Dataset::new(features, dim, labels, label_space)
}
