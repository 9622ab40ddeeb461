use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::BpsdClass;
use crate::error::{Error, Result};
use crate::framework::{compose, soft_vote, ActiveSet, ConventionalBaseline, TwoStagePredictor};
use crate::learners::argmax;
use crate::par;

use super::metrics::{
    binary_metrics, macro_auc, macro_metrics, roc_auc, summarize, ConfusionMatrix, MetricReport, Scope, Summary,
    METRIC_NAMES,
};
use super::splits::PatientSplit;

pub const PER_PATIENT_FILE: &str = "per_patient_metrics.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SUMMARY_FILE: &str = "summary.md";
pub const EXCLUSIONS_FILE: &str = "exclusions.log";

/// Everything needed to re-derive a two-stage output under any active set.
#[derive(Debug, Clone)]
struct CachedPrediction {
    truth: BpsdClass,
    occurrence_prob: f64,
    threshold: f64,
    components: [Vec<f64>; 3],
}

/// Stage outputs of every modeled patient's test instances.
#[derive(Debug, Clone)]
pub struct PredictionCache {
    patients: Vec<(String, Vec<CachedPrediction>)>,
}

/// Runs both stages once over the test splits of patients that have a
/// personalized model; other patients are not evaluated.
pub fn predict_cache(predictor: &TwoStagePredictor, splits: &[PatientSplit]) -> Result<PredictionCache> {
    let modeled: Vec<&PatientSplit> =
        splits.iter().filter(|s| predictor.personalized.contains_key(&s.patient_id) && !s.test.is_empty()).collect();
    let patients = par::map(&modeled, |s| -> Result<(String, Vec<CachedPrediction>)> {
        let model = predictor.personalized_for(&s.patient_id)?;
        let preds = s
            .test
            .iter()
            .map(|inst| {
                let p = model.occurrence_prob(&inst.features)?;
                Ok(CachedPrediction {
                    truth: inst.label4,
                    occurrence_prob: p,
                    threshold: model.threshold,
                    components: predictor.suite.all_probas(inst, p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((s.patient_id.clone(), preds))
    });
    Ok(PredictionCache { patients: patients.into_iter().collect::<Result<Vec<_>>>()? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEvaluation {
    pub patient_id: String,
    pub n_test: usize,
    /// Occurrence metrics; AUC from the personalized probability.
    pub binary: MetricReport,
    /// Four-class macro metrics of the final two-stage labels.
    pub macro4: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageEvaluation {
    pub active: ActiveSet,
    pub per_patient: Vec<PatientEvaluation>,
    pub binary_summary: [Summary; 6],
    pub macro_summary: [Summary; 6],
    /// One line per undefined per-patient metric.
    pub exclusions: Vec<String>,
}

impl TwoStageEvaluation {
    pub fn mean_macro_auc(&self) -> Option<f64> {
        self.macro_summary[0].mean
    }
}

fn patient_evaluation(patient_id: &str, preds: &[CachedPrediction], active: ActiveSet) -> Result<PatientEvaluation> {
    let mut truth4 = Vec::with_capacity(preds.len());
    let mut pred4 = Vec::with_capacity(preds.len());
    let mut scores4 = Vec::with_capacity(preds.len());
    let mut occ_truth = Vec::with_capacity(preds.len());
    let mut occ_pred = Vec::with_capacity(preds.len());
    let mut occ_scores = Vec::with_capacity(preds.len());
    for c in preds {
        let out = compose(c.occurrence_prob, c.threshold, soft_vote(&c.components, active)?);
        truth4.push(c.truth.index());
        pred4.push(out.final_class.index());
        scores4.push(out.scores4().to_vec());
        occ_truth.push(c.truth.is_abnormal() as usize);
        occ_pred.push((c.occurrence_prob >= c.threshold) as usize);
        occ_scores.push(c.occurrence_prob);
    }
    let occ_labels: Vec<bool> = occ_truth.iter().map(|&y| y == 1).collect();
    let binary = binary_metrics(&ConfusionMatrix::from_predictions(&occ_truth, &occ_pred, 2), 1, Scope::PatientBinary)
        .with_auc(roc_auc(&occ_scores, &occ_labels));
    let macro4 = macro_metrics(&ConfusionMatrix::from_predictions(&truth4, &pred4, 4), Scope::PatientMacro)
        .with_auc(macro_auc(&scores4, &truth4, 4));
    Ok(PatientEvaluation { patient_id: patient_id.to_string(), n_test: preds.len(), binary, macro4 })
}

/// Per-patient reports and aggregates for one active set.
pub fn evaluate_cached(cache: &PredictionCache, active: ActiveSet) -> Result<TwoStageEvaluation> {
    if cache.patients.is_empty() {
        return Err(Error::Degenerate("no evaluable patients".into()));
    }
    let per_patient = par::map(&cache.patients, |(pid, preds)| patient_evaluation(pid, preds, active))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut exclusions = Vec::new();
    for p in &per_patient {
        for r in [&p.binary, &p.macro4] {
            for (name, v) in METRIC_NAMES.iter().zip(r.values()) {
                if v.is_none() {
                    exclusions.push(format!("{}\t{}\t{name}\tundefined", p.patient_id, r.scope.name()));
                }
            }
        }
    }
    let binary: Vec<&MetricReport> = per_patient.iter().map(|p| &p.binary).collect();
    let macro4: Vec<&MetricReport> = per_patient.iter().map(|p| &p.macro4).collect();
    Ok(TwoStageEvaluation {
        active,
        binary_summary: summarize(&binary),
        macro_summary: summarize(&macro4),
        per_patient,
        exclusions,
    })
}

pub fn evaluate_two_stage(predictor: &TwoStagePredictor, splits: &[PatientSplit]) -> Result<TwoStageEvaluation> {
    evaluate_cached(&predict_cache(predictor, splits)?, predictor.active)
}

/// Pooled four-class metrics of the baseline over the given test splits.
pub fn evaluate_baseline(baseline: &ConventionalBaseline, splits: &[&PatientSplit]) -> Result<MetricReport> {
    let rows: Vec<_> = splits.iter().flat_map(|s| &s.test).collect();
    if rows.is_empty() {
        return Err(Error::Degenerate("no test instances for the baseline".into()));
    }
    let probs = par::map(&rows, |i| baseline.predict_proba(&i.features)).into_iter().collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = rows.iter().map(|i| i.label4.index()).collect();
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    Ok(macro_metrics(&ConfusionMatrix::from_predictions(&truth, &pred, 4), Scope::Pooled)
        .with_auc(macro_auc(&probs, &truth, 4)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub active: ActiveSet,
    pub summary: [Summary; 6],
}

/// The four ablation rows, each the per-patient four-class macro aggregate.
pub fn run_ablation(predictor: &TwoStagePredictor, splits: &[PatientSplit]) -> Result<Vec<AblationRow>> {
    let cache = predict_cache(predictor, splits)?;
    ablation_from_cache(&cache)
}

pub fn ablation_from_cache(cache: &PredictionCache) -> Result<Vec<AblationRow>> {
    ActiveSet::ABLATION
        .iter()
        .map(|&active| Ok(AblationRow { active, summary: evaluate_cached(cache, active)?.macro_summary }))
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn metric_header() -> String {
    METRIC_NAMES.join(",")
}

pub fn per_patient_csv(eval: &TwoStageEvaluation) -> String {
    let mut s = format!("patient_id,scope,n,{}\n", metric_header());
    for p in &eval.per_patient {
        for r in [&p.binary, &p.macro4] {
            let vals: Vec<String> = r.values().iter().map(|v| cell(*v)).collect();
            let _ = writeln!(s, "{},{},{},{}", p.patient_id, r.scope.name(), r.n, vals.join(","));
        }
    }
    s
}

pub fn aggregate_csv(eval: &TwoStageEvaluation, baseline: Option<&MetricReport>) -> String {
    let mut s = String::from("scope,metric,mean,std,n,n_undefined\n");
    for (scope, summary) in [(Scope::PatientBinary, &eval.binary_summary), (Scope::PatientMacro, &eval.macro_summary)] {
        for (name, sm) in METRIC_NAMES.iter().zip(summary.iter()) {
            let _ =
                writeln!(s, "{},{name},{},{},{},{}", scope.name(), cell(sm.mean), cell(sm.std), sm.n, sm.n_undefined);
        }
    }
    if let Some(b) = baseline {
        for (name, v) in METRIC_NAMES.iter().zip(b.values()) {
            let _ = writeln!(s, "{},{name},{},,{},{}", Scope::Pooled.name(), cell(v), b.n, v.is_none() as usize);
        }
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let cols: Vec<String> = METRIC_NAMES.iter().flat_map(|m| [format!("{m}_mean"), format!("{m}_std")]).collect();
    let mut s = format!("ensemble,{}\n", cols.join(","));
    for r in rows {
        let vals: Vec<String> = r.summary.iter().flat_map(|sm| [cell(sm.mean), cell(sm.std)]).collect();
        let _ = writeln!(s, "{},{}", r.active.to_list().replace(',', "+"), vals.join(","));
    }
    s
}

fn md_row(label: &str, cells: impl IntoIterator<Item = String>) -> String {
    format!("| {label} | {} |\n", cells.into_iter().collect::<Vec<_>>().join(" | "))
}

fn md_header(first: &str) -> String {
    let names = ["AUC", "Sensitivity", "Specificity", "Accuracy", "Precision", "F1-Score"];
    format!("| {first} | {} |\n|---|{}\n", names.join(" | "), "---|".repeat(names.len()))
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.3}"))
}

pub fn summary_markdown(
    eval: &TwoStageEvaluation,
    baseline: Option<&MetricReport>,
    ablation: Option<&[AblationRow]>,
) -> String {
    let mut s = String::from("# Evaluation summary\n\n");
    let _ = writeln!(s, "Evaluated patients: {}. Ensemble: {}.\n", eval.per_patient.len(), eval.active.label());
    s.push_str("## Performance comparison (four-class)\n\n");
    s.push_str(&md_header("Model"));
    if let Some(b) = baseline {
        s.push_str(&md_row("Conventional pooled model", b.values().iter().map(|v| fmt_value(*v))));
    }
    s.push_str(&md_row("Personalized two-stage (mean ± std)", eval.macro_summary.iter().map(Summary::display)));
    s.push_str("\n## Occurrence stage (binary, mean ± std)\n\n");
    s.push_str(&md_header("Model"));
    s.push_str(&md_row("Personalized occurrence", eval.binary_summary.iter().map(Summary::display)));
    if let Some(rows) = ablation {
        s.push_str("\n## Ablation on generalized models (four-class, mean ± std)\n\n");
        s.push_str(&md_header("Generalized models"));
        for r in rows {
            s.push_str(&md_row(&r.active.label(), r.summary.iter().map(Summary::display)));
        }
    }
    let single = eval.macro_summary.iter().any(Summary::single_sample);
    if single {
        s.push_str("\nNote: some aggregates rest on a single patient (std reported as 0).\n");
    }
    s
}

/// Writes the report files into `dir`.
pub fn write_reports(
    dir: &Path,
    eval: &TwoStageEvaluation,
    baseline: Option<&MetricReport>,
    ablation: Option<&[AblationRow]>,
    extra_exclusions: &[String],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(PER_PATIENT_FILE), per_patient_csv(eval))?;
    fs::write(dir.join(AGGREGATE_FILE), aggregate_csv(eval, baseline))?;
    if let Some(rows) = ablation {
        fs::write(dir.join(ABLATION_FILE), ablation_csv(rows))?;
    }
    fs::write(dir.join(SUMMARY_FILE), summary_markdown(eval, baseline, ablation))?;
    let mut log = String::new();
    for line in extra_exclusions.iter().chain(&eval.exclusions) {
        log.push_str(line);
        log.push('\n');
    }
    fs::write(dir.join(EXCLUSIONS_FILE), log)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(scope: Scope, auc: Option<f64>) -> MetricReport {
        MetricReport {
            auc,
            sensitivity: Some(0.5),
            specificity: None,
            accuracy: Some(0.75),
            precision: Some(1.0),
            f1: Some(2.0 / 3.0),
            scope,
            n: 8,
        }
    }

    fn eval() -> TwoStageEvaluation {
        let per_patient: Vec<PatientEvaluation> = [(0.8, "a"), (0.9, "b")]
            .iter()
            .map(|(auc, pid)| PatientEvaluation {
                patient_id: pid.to_string(),
                n_test: 8,
                binary: report(Scope::PatientBinary, Some(*auc)),
                macro4: report(Scope::PatientMacro, Some(auc - 0.1)),
            })
            .collect();
        let b: Vec<&MetricReport> = per_patient.iter().map(|p| &p.binary).collect();
        let m: Vec<&MetricReport> = per_patient.iter().map(|p| &p.macro4).collect();
        TwoStageEvaluation {
            active: ActiveSet::ALL,
            binary_summary: summarize(&b),
            macro_summary: summarize(&m),
            per_patient,
            exclusions: vec![],
        }
    }

    #[test]
    fn aggregate_is_recomputable_from_per_patient_csv() {
        let e = eval();
        let per = per_patient_csv(&e);
        let agg = aggregate_csv(&e, None);
        for (scope, metric_idx) in [("per_patient_binary", 0usize), ("per_patient_macro", 0), ("per_patient_binary", 4)]
        {
            let vals: Vec<Option<f64>> = per
                .lines()
                .skip(1)
                .filter(|l| l.split(',').nth(1) == Some(scope))
                .map(|l| l.split(',').nth(3 + metric_idx).unwrap().parse().ok())
                .collect();
            let s = Summary::of(&vals);
            let row = agg.lines().find(|l| l.starts_with(&format!("{scope},{},", METRIC_NAMES[metric_idx]))).unwrap();
            let f: Vec<&str> = row.split(',').collect();
            assert!((f[2].parse::<f64>().unwrap() - s.mean.unwrap()).abs() < 1e-12);
            assert!((f[3].parse::<f64>().unwrap() - s.std.unwrap()).abs() < 1e-12);
        }
        // undefined specificity leaves an empty cell, never NaN
        assert!(!per.contains("NaN"));
        assert!(agg.contains("per_patient_binary,specificity,,,0,2"));
    }

    #[test]
    fn summary_shows_mean_and_std() {
        let md = summary_markdown(&eval(), None, None);
        assert!(md.contains("0.850 ± 0.071"), "{md}");
    }

    #[test]
    fn ablation_table_shape() {
        let e = eval();
        let rows: Vec<AblationRow> =
            ActiveSet::ABLATION.iter().map(|&active| AblationRow { active, summary: e.macro_summary }).collect();
        let csv = ablation_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0].split(',').count(), 13);
        assert!(lines[4].starts_with("rdg+tcn+irg,"));
    }
}
