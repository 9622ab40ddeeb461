use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tree::{Tree, TreeBuilder};
use super::Dataset;
use crate::error::{Error, Result};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ForestMode {
    /// Bootstrap rows, exhaustive thresholds.
    #[serde(rename = "RF")]
    RandomForest,
    /// Full training set, one uniform random cut-point per candidate feature.
    #[serde(rename = "ERT")]
    ExtraTrees,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Candidate features per node; `None` means `ceil(sqrt(d))`.
    pub k_candidates: Option<usize>,
    pub min_split: usize,
    pub max_depth: Option<usize>,
    pub mode: ForestMode,
    pub seed: u64,
}

impl ForestParams {
    pub fn extra_trees(seed: u64) -> Self {
        Self { n_trees: 100, k_candidates: None, min_split: 2, max_depth: None, mode: ForestMode::ExtraTrees, seed }
    }

    pub fn random_forest(seed: u64) -> Self {
        Self { mode: ForestMode::RandomForest, ..Self::extra_trees(seed) }
    }

    pub fn candidates_for(&self, d: usize) -> usize {
        self.k_candidates.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).clamp(1, d.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
    n_classes: usize,
    n_features: usize,
    params: ForestParams,
    /// Summed weighted Gini decrease per feature over all trees.
    impurity_decrease: Vec<f64>,
}

fn compare_rows(data: &Dataset, a: usize, b: usize) -> Ordering {
    data.labels()[a].cmp(&data.labels()[b]).then_with(|| {
        data.row(a).iter().zip(data.row(b)).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    })
}

/// Fits an RF or ERT forest. Rows are first put in a canonical content order,
/// so the fitted forest does not depend on the order of the training rows.
pub fn fit_forest(data: &Dataset, params: &ForestParams) -> Result<Forest> {
    if data.is_empty() {
        return Err(Error::Degenerate("cannot fit a forest on an empty training set".into()));
    }
    if params.n_trees == 0 {
        return Err(Error::Config("n_trees must be positive".into()));
    }
    let d = data.n_features();
    let k = params.candidates_for(d);
    let mut canonical: Vec<usize> = (0..data.n_rows()).collect();
    canonical.sort_by(|&a, &b| compare_rows(data, a, b));

    let built = par::map_range(params.n_trees, |t| {
        let rows = match params.mode {
            ForestMode::ExtraTrees => canonical.clone(),
            ForestMode::RandomForest => {
                let mut rng = rng::stream(params.seed, &[t as u64, 0xB007]);
                (0..canonical.len()).map(|_| canonical[rng.gen_range(0..canonical.len())]).collect()
            }
        };
        let mut builder = TreeBuilder { data, params, k, tree_index: t as u64, importance: vec![0.0; d] };
        let tree = builder.build(rows);
        (tree, builder.importance)
    });

    let mut impurity_decrease = vec![0.0; d];
    let mut trees = Vec::with_capacity(built.len());
    for (tree, imp) in built {
        for (acc, v) in impurity_decrease.iter_mut().zip(imp) {
            *acc += v;
        }
        trees.push(tree);
    }
    Ok(Forest { trees, n_classes: data.n_classes(), n_features: d, params: params.clone(), impurity_decrease })
}

impl Forest {
    /// Builds a forest from explicit trees (no importances recorded).
    pub fn from_trees(trees: Vec<Tree>, n_classes: usize, n_features: usize, params: ForestParams) -> Self {
        Self { trees, n_classes, n_features, params, impurity_decrease: vec![0.0; n_features] }
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Mean of the per-tree leaf class frequencies.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch { expected: self.n_features, got: x.len() });
        }
        let mut out = vec![0.0; self.n_classes];
        for t in &self.trees {
            t.accumulate_proba(x, &mut out);
        }
        let n = self.trees.len() as f64;
        out.iter_mut().for_each(|p| *p /= n);
        Ok(out)
    }

    /// Mean decrease in Gini impurity per feature, normalized to sum to 1.
    /// All zeros when no tree has a split.
    pub fn feature_importances(&self) -> Vec<f64> {
        let total: f64 = self.impurity_decrease.iter().sum();
        if total <= 0.0 {
            return vec![0.0; self.n_features];
        }
        self.impurity_decrease.iter().map(|v| v / total).collect()
    }
}
