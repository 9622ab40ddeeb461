use serde::{Deserialize, Serialize};

/// Rank-based (Mann-Whitney) ROC AUC with midranks for ties.
/// `None` when either class is missing.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps midranks integral
    let mut pos_rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j) as u64; // 2 * mean of ranks i+1..=j
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        pos_rank_sum2 += mid2 * pos_in_group;
        i = j;
    }
    let n_pos = n_pos as u64;
    let u2 = pos_rank_sum2 - n_pos * (n_pos + 1);
    Some(u2 as f64 / (2 * n_pos * n_neg as u64) as f64)
}

/// One-vs-rest AUC averaged over classes that have both positives and negatives.
pub fn macro_auc(probs: &[Vec<f64>], truth: &[usize], n_classes: usize) -> Option<f64> {
    let aucs: Vec<f64> = (0..n_classes)
        .filter_map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let labels: Vec<bool> = truth.iter().map(|&y| y == c).collect();
            roc_auc(&scores, &labels)
        })
        .collect();
    mean(&aucs)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Rows are truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self { counts: vec![vec![0; n_classes]; n_classes] }
    }

    pub fn from_rows(counts: Vec<Vec<u64>>) -> Self {
        assert!(counts.iter().all(|r| r.len() == counts.len()), "confusion matrix must be square");
        Self { counts }
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], n_classes: usize) -> Self {
        let mut cm = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.counts[t][p] += 1;
        }
        cm
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn one_vs_rest(&self, c: usize) -> (f64, f64, f64, f64) {
        let tp = self.counts[c][c];
        let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
        let fp: u64 = self.counts.iter().map(|r| r[c]).sum::<u64>() - tp;
        let tn = self.total() - tp - fn_ - fp;
        (tp as f64, fn_ as f64, fp as f64, tn as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.n_classes()).map(|c| self.counts[c][c]).sum::<u64>() as f64 / total as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    PatientBinary,
    PatientMacro,
    Pooled,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::PatientBinary => "per_patient_binary",
            Scope::PatientMacro => "per_patient_macro",
            Scope::Pooled => "pooled",
        }
    }
}

pub const METRIC_NAMES: [&str; 6] = ["auc", "sensitivity", "specificity", "accuracy", "precision", "f1"];

/// The six reported metrics. `None` marks an undefined value (zero denominator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub scope: Scope,
    pub n: usize,
}

impl MetricReport {
    pub fn values(&self) -> [Option<f64>; 6] {
        [self.auc, self.sensitivity, self.specificity, self.accuracy, self.precision, self.f1]
    }

    pub fn with_auc(mut self, auc: Option<f64>) -> Self {
        self.auc = auc;
        self
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

fn f1(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    Some(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
}

/// One-vs-rest metrics for `positive`. AUC is left undefined; attach it with
/// [`MetricReport::with_auc`].
pub fn binary_metrics(cm: &ConfusionMatrix, positive: usize, scope: Scope) -> MetricReport {
    let (tp, fn_, fp, tn) = cm.one_vs_rest(positive);
    let sensitivity = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + fp);
    MetricReport {
        auc: None,
        sensitivity,
        specificity: ratio(tn, tn + fp),
        accuracy: cm.accuracy(),
        precision,
        f1: f1(precision, sensitivity),
        scope,
        n: cm.total() as usize,
    }
}

/// Unweighted mean of the one-vs-rest metrics over classes where each is
/// defined; accuracy is global.
pub fn macro_metrics(cm: &ConfusionMatrix, scope: Scope) -> MetricReport {
    let per_class: Vec<MetricReport> = (0..cm.n_classes()).map(|c| binary_metrics(cm, c, scope)).collect();
    let avg = |get: fn(&MetricReport) -> Option<f64>| mean(&per_class.iter().filter_map(get).collect::<Vec<_>>());
    MetricReport {
        auc: None,
        sensitivity: avg(|r| r.sensitivity),
        specificity: avg(|r| r.specificity),
        accuracy: cm.accuracy(),
        precision: avg(|r| r.precision),
        f1: avg(|r| r.f1),
        scope,
        n: cm.total() as usize,
    }
}

/// Mean and sample standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Number of defined values averaged.
    pub n: usize,
    /// Number of undefined values excluded.
    pub n_undefined: usize,
}

impl Summary {
    pub fn of(values: &[Option<f64>]) -> Summary {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let n = defined.len();
        let m = mean(&defined);
        let std = m.map(|m| {
            if n < 2 {
                0.0
            } else {
                (defined.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
            }
        });
        Summary { mean: m, std, n, n_undefined: values.len() - n }
    }

    pub fn single_sample(&self) -> bool {
        self.n == 1
    }

    pub fn display(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
            _ => "n/a".into(),
        }
    }
}

/// Per-metric summaries across a set of reports.
pub fn summarize(reports: &[&MetricReport]) -> [Summary; 6] {
    std::array::from_fn(|k| Summary::of(&reports.iter().map(|r| r.values()[k]).collect::<Vec<_>>()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, li) in labels.iter().enumerate() {
            for (j, lj) in labels.iter().enumerate() {
                if *li && !*lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(roc_auc(&[0.5; 6], &[true, false, true, false, false, true]), Some(0.5));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn auc_matches_pairwise_concordance() {
        let mut r = rng::stream(77, &[]);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..200).map(|_| (r.gen_range(0..20) as f64) / 4.0).collect();
            let labels: Vec<bool> = (0..200).map(|_| r.gen_bool(0.3)).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_hand_computed() {
        let cm = ConfusionMatrix::from_rows(vec![vec![50, 10], vec![5, 35]]);
        let r = binary_metrics(&cm, 1, Scope::PatientBinary);
        assert!((r.sensitivity.unwrap() - 0.875).abs() < 1e-4);
        assert!((r.specificity.unwrap() - 0.8333).abs() < 1e-4);
        assert!((r.accuracy.unwrap() - 0.85).abs() < 1e-4);
        assert!((r.precision.unwrap() - 0.7778).abs() < 1e-4);
        assert!((r.f1.unwrap() - 0.8235).abs() < 1e-4);
    }

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix::from_rows(vec![vec![4, 0, 0], vec![0, 3, 0], vec![0, 0, 9]]);
        let r = macro_metrics(&cm, Scope::PatientMacro);
        for v in [r.sensitivity, r.specificity, r.accuracy, r.precision, r.f1] {
            assert_eq!(v, Some(1.0));
        }
    }

    #[test]
    fn zero_predicted_positives_flags_precision() {
        let cm = ConfusionMatrix::from_rows(vec![vec![10, 0], vec![4, 0]]);
        let r = binary_metrics(&cm, 1, Scope::PatientBinary);
        assert_eq!(r.precision, None);
        assert_eq!(r.f1, None);
        assert_eq!(r.sensitivity, Some(0.0));
        assert!(r.values().iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn macro_of_two_classes_is_mean_of_binaries() {
        let cm = ConfusionMatrix::from_rows(vec![vec![50, 10], vec![5, 35]]);
        let m = macro_metrics(&cm, Scope::PatientMacro);
        let a = binary_metrics(&cm, 0, Scope::PatientBinary);
        let b = binary_metrics(&cm, 1, Scope::PatientBinary);
        for (k, v) in m.values().iter().enumerate().skip(1) {
            let expect = (a.values()[k].unwrap() + b.values()[k].unwrap()) / 2.0;
            if k == 3 {
                assert!((v.unwrap() - a.accuracy.unwrap()).abs() < 1e-15);
            } else {
                assert!((v.unwrap() - expect).abs() < 1e-15);
            }
        }
        // symmetric averaging: macro sensitivity = (sensitivity + specificity) / 2
        assert!((m.sensitivity.unwrap() - (b.sensitivity.unwrap() + b.specificity.unwrap()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn summary_examples() {
        let s = Summary::of(&[Some(0.8), Some(0.9)]);
        assert!((s.mean.unwrap() - 0.85).abs() < 1e-12);
        assert!((s.std.unwrap() - 0.0707).abs() < 1e-4);
        let one = Summary::of(&[Some(0.7), None]);
        assert_eq!(one.std, Some(0.0));
        assert!(one.single_sample());
        assert_eq!(one.n_undefined, 1);
        assert_eq!(Summary::of(&[None]).mean, None);
    }

    proptest! {
        #[test]
        fn auc_complement_for_tie_free_scores(
            raw in prop::collection::btree_set(-1_000_000i64..1_000_000, 2..80),
            flips in prop::collection::vec(any::<bool>(), 80),
        ) {
            let scores: Vec<f64> = raw.iter().map(|v| *v as f64 / 1000.0).collect();
            let labels: Vec<bool> = flips[..scores.len()].to_vec();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            if let (Some(a), Some(b)) = (roc_auc(&scores, &labels), roc_auc(&neg, &labels)) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            scores in prop::collection::vec(-5.0f64..5.0, 2..100),
            flips in prop::collection::vec(any::<bool>(), 100),
        ) {
            let labels: Vec<bool> = flips[..scores.len()].to_vec();
            let t: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels), roc_auc(&t, &labels));
        }
    }
}
