use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub l2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Unused by the zero-initialized optimizer; kept so every backbone takes a seed.
    pub seed: u64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self { l2: 1e-4, learning_rate: 0.1, epochs: 500, seed: 0 }
    }
}

/// Multinomial logistic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// `n_classes` rows of `n_features` weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Training objective before each epoch and after the last one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<f64>,
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl LogisticModel {
    pub fn zeros(n_classes: usize, n_features: usize) -> Self {
        Self { weights: vec![vec![0.0; n_features]; n_classes], bias: vec![0.0; n_classes], loss_history: Vec::new() }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn n_features(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(&self.bias).map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()).collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features() {
            return Err(Error::DimensionMismatch { expected: self.n_features(), got: x.len() });
        }
        let mut z = self.logits(x);
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Mean cross-entropy plus `l2/2 * ||W||^2`.
    pub fn objective(&self, data: &Dataset, l2: f64) -> f64 {
        let mut ce = 0.0;
        for i in 0..data.n_rows() {
            let mut z = self.logits(data.row(i));
            softmax_in_place(&mut z);
            ce -= z[data.labels()[i]].max(f64::MIN_POSITIVE).ln();
        }
        let reg: f64 = self.weights.iter().flatten().map(|w| w * w).sum();
        ce / data.n_rows() as f64 + 0.5 * l2 * reg
    }
}

/// Full-batch gradient descent from zero weights. Callers scale inputs first.
pub fn fit_logistic(data: &Dataset, params: &LogisticParams) -> Result<LogisticModel> {
    if data.n_present_classes() < 2 {
        return Err(Error::Degenerate("logistic regression needs at least two classes".into()));
    }
    let (k, d, n) = (data.n_classes(), data.n_features(), data.n_rows() as f64);
    let mut model = LogisticModel::zeros(k, d);
    let mut history = Vec::with_capacity(params.epochs + 1);
    for _ in 0..params.epochs {
        history.push(model.objective(data, params.l2));
        let mut gw = vec![vec![0.0; d]; k];
        let mut gb = vec![0.0; k];
        for i in 0..data.n_rows() {
            let x = data.row(i);
            let mut p = model.logits(x);
            softmax_in_place(&mut p);
            p[data.labels()[i]] -= 1.0;
            for c in 0..k {
                gb[c] += p[c];
                for (g, v) in gw[c].iter_mut().zip(x) {
                    *g += p[c] * v;
                }
            }
        }
        for c in 0..k {
            model.bias[c] -= params.learning_rate * gb[c] / n;
            for (w, g) in model.weights[c].iter_mut().zip(&gw[c]) {
                *w -= params.learning_rate * (g / n + params.l2 * *w);
            }
        }
    }
    history.push(model.objective(data, params.l2));
    model.loss_history = history;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::argmax;

    fn one_d() -> Dataset {
        Dataset::from_rows(&[vec![-1.0], vec![1.0]], vec![0, 1]).unwrap()
    }

    #[test]
    fn separable_one_d() {
        let m = fit_logistic(&one_d(), &LogisticParams::default()).unwrap();
        assert_eq!(argmax(&m.predict_proba(&[-2.0]).unwrap()), 0);
        assert_eq!(argmax(&m.predict_proba(&[2.0]).unwrap()), 1);
    }

    #[test]
    fn zero_weights_are_uniform() {
        let m = LogisticModel::zeros(3, 4);
        assert_eq!(m.predict_proba(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0 / 3.0; 3]);
        let m = fit_logistic(&one_d(), &LogisticParams { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(m.predict_proba(&[5.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn duplication_invariance() {
        let rows = vec![vec![-1.0, 0.3], vec![0.5, -0.2], vec![1.0, 1.0]];
        let y = vec![0, 1, 2];
        let a = fit_logistic(&Dataset::from_rows(&rows, y.clone()).unwrap(), &LogisticParams::default()).unwrap();
        let rows2: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
        let y2: Vec<usize> = y.iter().chain(&y).cloned().collect();
        let b = fit_logistic(&Dataset::from_rows(&rows2, y2).unwrap(), &LogisticParams::default()).unwrap();
        for (wa, wb) in a.weights.iter().flatten().zip(b.weights.iter().flatten()) {
            assert!((wa - wb).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_non_increasing() {
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let t = i as f64 / 10.0;
                vec![t.sin(), (1.7 * t).cos(), t / 6.0 - 0.5]
            })
            .collect();
        let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let m = fit_logistic(&Dataset::from_rows(&rows, y).unwrap(), &LogisticParams::default()).unwrap();
        assert_eq!(m.loss_history.len(), 501);
        for w in m.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let data = Dataset::from_rows_with_classes(&[vec![1.0], vec![2.0]], vec![1, 1], 2).unwrap();
        assert!(matches!(fit_logistic(&data, &LogisticParams::default()), Err(Error::Degenerate(_))));
    }
}
