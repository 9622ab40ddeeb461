//! Tree ensembles and logistic regression, all exposing class probabilities.

mod forest;
pub(crate) mod logistic;
mod tree;

pub use forest::{fit_forest, Forest, ForestMode, ForestParams};
pub use logistic::{fit_logistic, LogisticModel, LogisticParams};
pub use tree::{Node, Tree};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major design matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    n_features: usize,
    y: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(x: Vec<f64>, n_features: usize, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        if n_features == 0 && !y.is_empty() {
            return Err(Error::Data("dataset rows have no features".into()));
        }
        if x.len() != n_features * y.len() {
            return Err(Error::DimensionMismatch { expected: n_features * y.len(), got: x.len() });
        }
        if let Some(bad) = y.iter().find(|&&c| c >= n_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {n_classes})")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self { x, n_features, y, n_classes })
    }

    /// Number of classes is `max(y) + 1`.
    pub fn from_rows(rows: &[Vec<f64>], y: Vec<usize>) -> Result<Self> {
        let n_classes = y.iter().copied().max().map_or(0, |m| m + 1);
        Self::from_rows_with_classes(rows, y, n_classes)
    }

    pub fn from_rows_with_classes(rows: &[Vec<f64>], y: Vec<usize>, n_classes: usize) -> Result<Self> {
        if rows.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: rows.len(), got: y.len() });
        }
        let d = rows.first().map_or(0, Vec::len);
        let mut x = Vec::with_capacity(d * rows.len());
        for r in rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: r.len() });
            }
            x.extend_from_slice(r);
        }
        Self::new(x, d, y, n_classes)
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.x[i * self.n_features + j]
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }

    pub fn n_present_classes(&self) -> usize {
        self.class_counts().iter().filter(|&&c| c > 0).count()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            x.extend_from_slice(self.row(i));
        }
        Dataset {
            x,
            n_features: self.n_features,
            y: indices.iter().map(|&i| self.y[i]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// Learner family used as a backbone inside the framework.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "ERT")]
    ExtraTrees,
    #[serde(rename = "RF")]
    RandomForest,
    #[serde(rename = "LR")]
    Logistic,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::ExtraTrees => "ERT",
            BackboneKind::RandomForest => "RF",
            BackboneKind::Logistic => "LR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ERT" => Some(BackboneKind::ExtraTrees),
            "RF" => Some(BackboneKind::RandomForest),
            "LR" => Some(BackboneKind::Logistic),
            _ => None,
        }
    }

    pub fn default_params(self, seed: u64) -> BackboneParams {
        match self {
            BackboneKind::ExtraTrees => BackboneParams::Forest(ForestParams::extra_trees(seed)),
            BackboneKind::RandomForest => BackboneParams::Forest(ForestParams::random_forest(seed)),
            BackboneKind::Logistic => BackboneParams::Logistic(LogisticParams::default()),
        }
    }

    /// The four-point hyperparameter grid searched by cross-validation.
    pub fn grid(self, seed: u64) -> Vec<BackboneParams> {
        match self {
            BackboneKind::ExtraTrees | BackboneKind::RandomForest => {
                let base = match self {
                    BackboneKind::ExtraTrees => ForestParams::extra_trees(seed),
                    _ => ForestParams::random_forest(seed),
                };
                let mut out = Vec::new();
                for max_depth in [None, Some(12)] {
                    for min_split in [2, 10] {
                        out.push(BackboneParams::Forest(ForestParams { max_depth, min_split, ..base.clone() }));
                    }
                }
                out
            }
            BackboneKind::Logistic => [1e-4, 1e-3, 1e-2, 1e-1]
                .into_iter()
                .map(|l2| BackboneParams::Logistic(LogisticParams { l2, ..Default::default() }))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum BackboneParams {
    Forest(ForestParams),
    Logistic(LogisticParams),
}

impl BackboneParams {
    pub fn fit(&self, data: &Dataset) -> Result<Classifier> {
        match self {
            BackboneParams::Forest(p) => fit_forest(data, p).map(Classifier::Forest),
            BackboneParams::Logistic(p) => fit_logistic(data, p).map(Classifier::Logistic),
        }
    }

    /// Same hyperparameters with a different seed.
    pub fn with_seed(&self, seed: u64) -> BackboneParams {
        match self {
            BackboneParams::Forest(p) => BackboneParams::Forest(ForestParams { seed, ..p.clone() }),
            BackboneParams::Logistic(p) => BackboneParams::Logistic(LogisticParams { seed, ..p.clone() }),
        }
    }
}

/// A fitted probabilistic classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Classifier {
    Forest(Forest),
    Logistic(LogisticModel),
}

impl Classifier {
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Classifier::Forest(f) => f.predict_proba(x),
            Classifier::Logistic(m) => m.predict_proba(x),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Classifier::Forest(f) => f.n_classes(),
            Classifier::Logistic(m) => m.n_classes(),
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            Classifier::Forest(f) => f.n_features(),
            Classifier::Logistic(m) => m.n_features(),
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}
