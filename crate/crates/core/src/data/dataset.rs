use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("row {row}: expected {expected} features, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        num_classes: usize,
    },
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("row {row}: source examples must be labeled")]
    UnlabeledSource { row: usize },
    #[error("row {row}: domain {found} does not match {expected}")]
    MixedDomains {
        row: usize,
        expected: Domain,
        found: Domain,
    },
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("invalid generator parameters: {0}")]
    Generator(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(format!("unknown domain {other:?}")),
        }
    }
}

/// Examples of one domain. Features are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    domain: Domain,
    num_classes: usize,
    dim: usize,
    features: Vec<f64>,
    labels: Vec<Option<usize>>,
}

impl Dataset {
    pub fn new(
        domain: Domain,
        num_classes: usize,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<Option<usize>>,
    ) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(DataError::Ragged {
                row: 0,
                expected: dim,
                found: features.len() / labels.len(),
            });
        }
        for (row, l) in labels.iter().enumerate() {
            match l {
                Some(y) if *y >= num_classes => {
                    return Err(DataError::LabelOutOfRange {
                        row,
                        label: *y as i64,
                        num_classes,
                    })
                }
                None if domain == Domain::Source => return Err(DataError::UnlabeledSource { row }),
                _ => {}
            }
        }
        Ok(Self {
            domain,
            num_classes,
            dim,
            features,
            labels,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// Labels of a fully labeled dataset.
    pub fn dense_labels(&self) -> Option<Vec<usize>> {
        self.labels.iter().copied().collect()
    }

    /// Row-major features of the selected examples.
    pub fn gather(&self, index: &[usize]) -> Vec<f64> {
        index.iter().flat_map(|&i| self.row(i).iter().copied()).collect()
    }

    /// Per-class example counts over labeled rows.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        self.labels.iter().flatten().for_each(|&y| c[y] += 1);
        c
    }

    /// Copy with all labels removed, as training code sees the target domain.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: vec![None; self.labels.len()],
            ..self.clone()
        }
    }
}

/// Ground-truth target labels, kept apart from anything the training loop reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Label -> example indices table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIndex {
    buckets: Vec<Vec<usize>>,
}

impl ClassIndex {
    /// Builds buckets from per-example labels; `None` entries are left out.
    pub fn build<I>(labels: I, num_classes: usize) -> Self
    where
        I: IntoIterator<Item = Option<usize>>,
    {
        let mut buckets = vec![Vec::new(); num_classes];
        for (i, l) in labels.into_iter().enumerate() {
            if let Some(y) = l {
                buckets[y].push(i);
            }
        }
        Self { buckets }
    }

    pub fn from_labels(labels: &[usize], num_classes: usize) -> Self {
        Self::build(labels.iter().map(|&y| Some(y)), num_classes)
    }

    pub fn of_dataset(ds: &Dataset) -> Self {
        Self::build(ds.labels().iter().copied(), ds.num_classes())
    }

    pub fn bucket(&self, label: usize) -> &[usize] {
        &self.buckets[label]
    }

    pub fn num_classes(&self) -> usize {
        self.buckets.len()
    }

    /// Labels with at least one example.
    pub fn live_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.buckets
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.is_empty())
            .map(|(j, _)| j)
    }

    pub fn total(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }
}
