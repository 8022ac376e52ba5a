//! Datasets, synthetic covariate-shift generators, CSV ingestion and label
//! standardization.

mod csv_io;
mod synth;

pub use csv_io::{load_csv, save_dataset, ColumnKind, ColumnSpec, CsvSchema};
pub use synth::{
    cholesky, generate_perturbed, generate_synthetic, CovarianceMode, DomainParams, Gaussian,
    SynthOutput, SynthSpec,
};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Model inputs for a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    /// `n×d` numeric block.
    pub numeric: Array2<f64>,
    /// One id vector per categorical column, each of length `n`.
    pub categorical: Vec<Vec<usize>>,
}

impl Features {
    pub fn from_numeric(numeric: Array2<f64>) -> Self {
        Self {
            numeric,
            categorical: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.numeric.nrows()
    }

    pub fn select(&self, rows: &[usize]) -> Features {
        Features {
            numeric: self.numeric.select(Axis(0), rows),
            categorical: self
                .categorical
                .iter()
                .map(|col| rows.iter().map(|&r| col[r]).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub numeric: Vec<String>,
    /// Categorical column names with their cardinalities.
    pub categorical: Vec<(String, usize)>,
}

impl FeatureSchema {
    pub fn numeric_only(dim: usize) -> Self {
        Self {
            numeric: (0..dim).map(|i| format!("x{i}")).collect(),
            categorical: Vec::new(),
        }
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.categorical.iter().map(|(_, c)| *c).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Features,
    pub labels: Vec<f64>,
    pub domain: Domain,
    pub schema: FeatureSchema,
}

impl Dataset {
    pub fn new(features: Features, labels: Vec<f64>, domain: Domain, schema: FeatureSchema) -> Result<Self> {
        if features.n_rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.n_rows(),
                labels.len()
            )));
        }
        if features.numeric.ncols() != schema.numeric.len()
            || features.categorical.len() != schema.categorical.len()
        {
            return Err(Error::Shape("features do not match schema".into()));
        }
        for (col, (name, card)) in features.categorical.iter().zip(&schema.categorical) {
            if col.len() != labels.len() {
                return Err(Error::Shape(format!("categorical column `{name}` length")));
            }
            if let Some(bad) = col.iter().find(|&&id| id >= *card) {
                return Err(Error::Shape(format!(
                    "categorical `{name}` id {bad} exceeds cardinality {card}"
                )));
            }
        }
        if let Some(i) = labels.iter().position(|y| !y.is_finite()) {
            return Err(Error::NonFinite(format!("label at row {i}")));
        }
        Ok(Self {
            features,
            labels,
            domain,
            schema,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.numeric.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            domain: self.domain,
            schema: self.schema.clone(),
        }
    }

    /// Index of a feature by name: `Ok((true, i))` for numeric column `i`,
    /// `Ok((false, i))` for categorical column `i`.
    pub fn feature_index(&self, name: &str) -> Option<(bool, usize)> {
        if let Some(i) = self.schema.numeric.iter().position(|n| n == name) {
            return Some((true, i));
        }
        self.schema
            .categorical
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| (false, i))
    }
}

/// Seeded shuffle split. Both parts keep the original row order.
pub fn split_train_test(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = dataset.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Label standardization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScaler {
    pub mean: f64,
    pub std: f64,
}

impl LabelScaler {
    pub fn apply(&self, d: &mut Dataset) {
        for y in &mut d.labels {
            *y = (*y - self.mean) / self.std;
        }
    }
}

/// Fits mean and (population) standard deviation on source ∪ target-train
/// labels and rescales all three splits in place.
pub fn standardize_labels(
    source: &mut Dataset,
    target_train: &mut Dataset,
    target_test: &mut Dataset,
) -> Result<LabelScaler> {
    let pool: Vec<f64> = source
        .labels
        .iter()
        .chain(&target_train.labels)
        .copied()
        .collect();
    if pool.is_empty() {
        return Err(Error::Empty("no labels to standardize".into()));
    }
    let n = pool.len() as f64;
    let mean = pool.iter().sum::<f64>() / n;
    let var = pool.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::Config("labels have zero variance".into()));
    }
    let scaler = LabelScaler {
        mean,
        std: var.sqrt(),
    };
    scaler.apply(source);
    scaler.apply(target_train);
    scaler.apply(target_test);
    Ok(scaler)
}

/// Min-max maps labels of all given datasets jointly onto `[0, 1]`.
/// Used only when checking inequalities that assume unit-range labels.
pub fn minmax_labels(datasets: &mut [&mut Dataset]) -> Result<(f64, f64)> {
    let (lo, hi) = datasets
        .iter()
        .flat_map(|d| d.labels.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
            (lo.min(y), hi.max(y))
        });
    if !(hi > lo) {
        return Err(Error::Config("labels have zero range".into()));
    }
    for d in datasets.iter_mut() {
        for y in &mut d.labels {
            *y = (*y - lo) / (hi - lo);
        }
    }
    Ok((lo, hi))
}
