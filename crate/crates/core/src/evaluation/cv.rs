use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::oversample_indices;
use crate::learners::{BackboneParams, Dataset};
use crate::par;

use super::metrics::macro_auc;

/// Outcome of a cross-validated grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub best: BackboneParams,
    pub best_index: usize,
    /// Mean held-out macro-AUC per grid point (`None` if no fold was scorable).
    pub scores: Vec<Option<f64>>,
    pub fold_fits: usize,
}

/// Held-out macro-AUC of `params` on one fold. Training rows are
/// oversampled, validation rows are left as they are.
fn fold_score(
    data: &Dataset,
    fold_of_row: &[usize],
    fold: usize,
    params: &BackboneParams,
    seed: u64,
) -> Result<Option<f64>> {
    let (train, val): (Vec<usize>, Vec<usize>) = (0..data.n_rows()).partition(|&i| fold_of_row[i] != fold);
    let train_data = data.subset(&train);
    let idx = oversample_indices(train_data.labels(), seed);
    let model = params.fit(&train_data.subset(&idx))?;
    let probs = val.iter().map(|&i| model.predict_proba(data.row(i))).collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = val.iter().map(|&i| data.labels()[i]).collect();
    Ok(macro_auc(&probs, &truth, data.n_classes()))
}

/// Picks the grid point with the highest mean held-out macro-AUC (first on
/// ties). Folds whose training part lacks two classes or whose validation part
/// is empty are skipped, so a regular search performs `grid.len() * n_folds` fits.
pub fn grid_search(
    data: &Dataset,
    fold_of_row: &[usize],
    n_folds: usize,
    grid: &[BackboneParams],
    seed: u64,
) -> Result<GridSearch> {
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    if fold_of_row.len() != data.n_rows() {
        return Err(Error::DimensionMismatch { expected: data.n_rows(), got: fold_of_row.len() });
    }
    let usable: Vec<usize> = (0..n_folds)
        .filter(|&f| {
            let val = fold_of_row.iter().filter(|&&g| g == f).count();
            let mut seen = vec![false; data.n_classes()];
            for (i, &g) in fold_of_row.iter().enumerate() {
                if g != f {
                    seen[data.labels()[i]] = true;
                }
            }
            val > 0 && seen.iter().filter(|s| **s).count() >= 2
        })
        .collect();
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| usable.iter().map(move |&f| (g, f))).collect();
    let results = par::map(&jobs, |&(g, f)| fold_score(data, fold_of_row, f, &grid[g], seed));
    let mut per_point: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    for (&(g, _), r) in jobs.iter().zip(results) {
        if let Some(s) = r? {
            per_point[g].push(s);
        }
    }
    let scores: Vec<Option<f64>> =
        per_point.iter().map(|s| (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)).collect();
    let mut best_index = 0;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = s {
            if scores[best_index].is_none_or(|b| *s > b) {
                best_index = i;
            }
        }
    }
    Ok(GridSearch { best: grid[best_index].clone(), best_index, scores, fold_fits: jobs.len() })
}
