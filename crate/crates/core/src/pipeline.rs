//! End-to-end orchestration: cohort to instances, splits, training and evaluation.

use crate::cohort::{align_cohort, Cohort};
use crate::error::Result;
use crate::evaluation::report::{
    ablation_from_cache, evaluate_baseline, evaluate_cached, predict_cache, AblationRow, TwoStageEvaluation,
};
use crate::evaluation::splits::{make_splits, PatientSplit, SplitPlan};
use crate::evaluation::MetricReport;
use crate::featurize::{build_instances, Instance};
use crate::framework::{
    train_conventional_baseline, train_two_stage, ConventionalBaseline, FrameworkConfig, TrainOutcome,
    TwoStagePredictor,
};

/// Windowed instances and the split plan of a cohort.
#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Time-ordered instances, one vector per patient in cohort order.
    pub instances: Vec<Vec<Instance>>,
    pub plan: SplitPlan,
    /// Splits of every patient the plan keeps.
    pub splits: Vec<PatientSplit>,
}

pub fn prepare(cohort: &Cohort, cfg: &FrameworkConfig) -> PreparedData {
    let grids = align_cohort(cohort);
    let instances: Vec<Vec<Instance>> =
        cohort.patients.iter().zip(&grids).map(|(p, g)| build_instances(g, &p.events, &p.demographics)).collect();
    let plan = make_splits(&instances, cfg.cv_folds, cfg.seed);
    let splits = instances.iter().filter_map(|i| plan.apply(i)).collect();
    PreparedData { instances, plan, splits }
}

/// Trained two-stage predictor plus the pooled baseline.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub outcome: TrainOutcome,
    pub baseline: ConventionalBaseline,
}

impl TrainedModels {
    pub fn evaluate(&self, data: &PreparedData) -> Result<EvaluationResults> {
        evaluate(&self.outcome.predictor, &self.baseline, data, &self.outcome.skipped)
    }
}

pub fn train(data: &PreparedData, cfg: &FrameworkConfig) -> Result<TrainedModels> {
    let outcome = train_two_stage(&data.splits, &data.plan, cfg)?;
    let pooled: Vec<Instance> = data.splits.iter().flat_map(|s| s.train.iter().cloned()).collect();
    let baseline = train_conventional_baseline(&pooled, &data.plan, cfg)?;
    Ok(TrainedModels { outcome, baseline })
}

#[derive(Debug, Clone)]
pub struct EvaluationResults {
    pub two_stage: TwoStageEvaluation,
    pub baseline: MetricReport,
    pub ablation: Vec<AblationRow>,
    /// Patients left out of evaluation, with the reason.
    pub excluded: Vec<String>,
}

/// Evaluates the two-stage predictor, the baseline (pooled over the same
/// patients' test splits) and the ablation rows.
pub fn evaluate(
    predictor: &TwoStagePredictor,
    baseline: &ConventionalBaseline,
    data: &PreparedData,
    skipped: &[(String, String)],
) -> Result<EvaluationResults> {
    let cache = predict_cache(predictor, &data.splits)?;
    let two_stage = evaluate_cached(&cache, predictor.active)?;
    let evaluated: Vec<&PatientSplit> =
        data.splits.iter().filter(|s| predictor.personalized.contains_key(&s.patient_id)).collect();
    let baseline = evaluate_baseline(baseline, &evaluated)?;
    let ablation = ablation_from_cache(&cache)?;
    let mut excluded: Vec<String> = data.plan.excluded.iter().map(|(p, r)| format!("{p}\tsplit\t{r}")).collect();
    excluded.extend(skipped.iter().map(|(p, r)| format!("{p}\tpersonalized\t{r}")));
    Ok(EvaluationResults { two_stage, baseline, ablation, excluded })
}
