//! Stage one: one binary occurrence model per patient. Stage two: a pooled
//! three-class ensemble (raw-feature model, TCN model, individual-representation
//! model) that names the symptom type once stage one fires. Also hosts the
//! conventional pooled four-class baseline used as the comparator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cohort::{BpsdClass, N_SIGNALS};
use crate::error::{Error, Result};
use crate::evaluation::cv::{grid_search, GridSearch};
use crate::evaluation::splits::{PatientSplit, SplitPlan};
use crate::featurize::{
    ensure_trainable, oversample_indices, select_features_rows, FeatureMask, Instance, Scaler, SelectionMode,
    N_FEATURES, N_LAGS, N_SIGNAL_FEATURES,
};
use crate::learners::{argmax, BackboneKind, BackboneParams, Classifier, Dataset, ForestParams};
use crate::tcn::{self, TcnConfig, TcnNetwork, TrainHistory};
use crate::{par, rng};

/// Length of an individual-representation vector: base features, per-signal
/// training mean and stdev, and the occurrence probability.
pub const IRG_DIM: usize = N_FEATURES + 2 * N_SIGNALS + 1;

/// Occurrence probability fed to the IRG model when no personalized model exists.
pub const UNMODELED_OCCURRENCE: f64 = 0.5;

/// Which generalized models vote in the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActiveSet {
    pub rdg: bool,
    pub tcn: bool,
    pub irg: bool,
}

impl ActiveSet {
    pub const ALL: ActiveSet = ActiveSet { rdg: true, tcn: true, irg: true };

    /// The ablation rows, in report order.
    pub const ABLATION: [ActiveSet; 4] = [
        ActiveSet { rdg: true, tcn: false, irg: false },
        ActiveSet { rdg: true, tcn: true, irg: false },
        ActiveSet { rdg: true, tcn: false, irg: true },
        ActiveSet::ALL,
    ];

    /// Parses a comma list such as `rdg,irg,tcn`.
    pub fn parse(s: &str) -> Result<ActiveSet> {
        let mut set = ActiveSet { rdg: false, tcn: false, irg: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "rdg" => set.rdg = true,
                "tcn" => set.tcn = true,
                "irg" => set.irg = true,
                other => return Err(Error::Config(format!("unknown ensemble member `{other}`"))),
            }
        }
        if set.is_empty() {
            return Err(Error::Config("ensemble active set is empty".into()));
        }
        Ok(set)
    }

    pub fn is_empty(&self) -> bool {
        !(self.rdg || self.tcn || self.irg)
    }

    pub fn members(&self) -> Vec<Component> {
        Component::ALL
            .into_iter()
            .filter(|c| match c {
                Component::Rdg => self.rdg,
                Component::Tcn => self.tcn,
                Component::Irg => self.irg,
            })
            .collect()
    }

    /// Canonical spelling, e.g. `rdg,tcn`.
    pub fn to_list(&self) -> String {
        self.members().iter().map(|c| c.key()).collect::<Vec<_>>().join(",")
    }

    /// Table label, e.g. `{RDG, IRG, TCN}`.
    pub fn label(&self) -> String {
        let mut names = Vec::new();
        if self.rdg {
            names.push("RDG");
        }
        if self.irg {
            names.push("IRG");
        }
        if self.tcn {
            names.push("TCN");
        }
        format!("{{{}}}", names.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Rdg,
    Tcn,
    Irg,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Rdg, Component::Tcn, Component::Irg];

    pub fn key(self) -> &'static str {
        match self {
            Component::Rdg => "rdg",
            Component::Tcn => "tcn",
            Component::Irg => "irg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameworkConfig {
    pub backbone: BackboneKind,
    /// Occurrence probability at or above which stage one fires.
    pub threshold: f64,
    pub selection: SelectionMode,
    pub tcn: TcnConfig,
    pub ensemble: ActiveSet,
    pub cv_folds: usize,
    /// Select generalized backbone hyperparameters by grouped CV.
    pub tune_generalized: bool,
    /// Also tune the conventional baseline on the same grid.
    pub tune_baseline: bool,
    /// Chronological folds used to produce out-of-sample occurrence
    /// probabilities for the IRG training rows.
    pub irg_crossfit_folds: usize,
    pub seed: u64,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::ExtraTrees,
            threshold: 0.5,
            selection: SelectionMode::None,
            tcn: TcnConfig::default(),
            ensemble: ActiveSet::ALL,
            cv_folds: 5,
            tune_generalized: true,
            tune_baseline: true,
            irg_crossfit_folds: 3,
            seed: 42,
        }
    }
}

impl FrameworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        if self.irg_crossfit_folds < 2 {
            return Err(Error::Config("irg_crossfit_folds must be at least 2".into()));
        }
        if self.ensemble.is_empty() {
            return Err(Error::Config("ensemble active set is empty".into()));
        }
        if self.tcn.n_classes != 3 || self.tcn.window_len() != N_SIGNAL_FEATURES || self.tcn.seq_len != N_LAGS {
            return Err(Error::Config("TCN must take 11 x 5 windows and emit 3 classes".into()));
        }
        self.tcn.validate()
    }

    fn seed_for(&self, part: u64) -> u64 {
        rng::derive(self.seed, &[part])
    }

    /// The per-component seeds derived from `seed`.
    pub fn component_seeds(&self) -> BTreeMap<String, u64> {
        [("personalized", 1), ("rdg", 2), ("tcn", 3), ("tcn_readout", 4), ("irg", 5), ("baseline", 6)]
            .into_iter()
            .map(|(k, part)| (k.to_string(), self.seed_for(part)))
            .collect()
    }
}

/// Standardization followed by an optional feature mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub scaler: Scaler,
    pub mask: FeatureMask,
}

impl Preprocessor {
    fn fit(rows: &[&[f64]], labels: &[usize], selection: SelectionMode, seed: u64) -> Result<Self> {
        let scaler = Scaler::fit_rows(rows.iter().copied())?;
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| scaler.transform(r)).collect();
        let mask = select_features_rows(&scaled, labels, selection, seed)?;
        Ok(Self { scaler, mask })
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.scaler.dim() {
            return Err(Error::DimensionMismatch { expected: self.scaler.dim(), got: x.len() });
        }
        Ok(self.mask.apply(&self.scaler.transform(x)))
    }
}

/// Preprocesses `rows`, oversamples to balance `labels`, and fits `params`.
fn fit_balanced(
    rows: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    params: &BackboneParams,
    seed: u64,
) -> Result<Classifier> {
    let idx = oversample_indices(labels, seed);
    let x: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
    let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    params.fit(&Dataset::from_rows_with_classes(&x, y, n_classes)?)
}

/// Binary occurrence model for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizedModel {
    pub patient_id: String,
    pub preprocessor: Preprocessor,
    pub classifier: Classifier,
    pub threshold: f64,
}

impl PersonalizedModel {
    /// Probability that a symptom occurs within the horizon.
    pub fn occurrence_prob(&self, features: &[f64]) -> Result<f64> {
        Ok(self.classifier.predict_proba(&self.preprocessor.transform(features)?)?[1])
    }

    pub fn fires(&self, p: f64) -> bool {
        p >= self.threshold
    }
}

/// Scaler, oversampling and backbone fit on one patient's training split.
/// Fails with [`Error::Degenerate`] unless both outcomes are present.
pub fn train_personalized(train: &[Instance], cfg: &FrameworkConfig) -> Result<PersonalizedModel> {
    ensure_trainable(train, "train_personalized")?;
    let Some(first) = train.first() else {
        return Err(Error::Degenerate("empty training split".into()));
    };
    if let Some(other) = train.iter().find(|i| i.patient_id != first.patient_id) {
        return Err(Error::Data(format!(
            "personalized training mixes patients `{}` and `{}`",
            first.patient_id, other.patient_id
        )));
    }
    let n_abnormal = train.iter().filter(|i| i.occurred).count();
    if n_abnormal == 0 || n_abnormal == train.len() {
        let which = if n_abnormal == 0 { "no abnormal" } else { "no normal" };
        return Err(Error::Degenerate(format!("{which} training instances")));
    }
    let seed = cfg.seed_for(1);
    let rows: Vec<&[f64]> = train.iter().map(|i| i.features.as_slice()).collect();
    let labels: Vec<usize> = train.iter().map(|i| i.occurred as usize).collect();
    let preprocessor = Preprocessor::fit(&rows, &labels, cfg.selection, seed)?;
    let x = rows.iter().map(|r| preprocessor.transform(r)).collect::<Result<Vec<_>>>()?;
    let classifier = fit_balanced(&x, &labels, 2, &cfg.backbone.default_params(seed), seed)?;
    Ok(PersonalizedModel { patient_id: first.patient_id.clone(), preprocessor, classifier, threshold: cfg.threshold })
}

/// Per-signal mean and population stdev of the current-slot values.
pub fn patient_signal_stats(train: &[Instance]) -> Vec<f64> {
    let n = train.len().max(1) as f64;
    let mut out = Vec::with_capacity(2 * N_SIGNALS);
    let mut means = [0.0; N_SIGNALS];
    for (s, m) in means.iter_mut().enumerate() {
        *m = train.iter().map(|i| i.signal(0, s)).sum::<f64>() / n;
    }
    out.extend_from_slice(&means);
    for (s, m) in means.iter().enumerate() {
        let var = train.iter().map(|i| (i.signal(0, s) - m).powi(2)).sum::<f64>() / n;
        out.push(var.sqrt());
    }
    out
}

/// Base features, patient statistics, occurrence probability.
pub fn individual_representation(features: &[f64], stats: &[f64], occurrence_prob: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(IRG_DIM);
    v.extend_from_slice(features);
    v.extend_from_slice(stats);
    v.push(occurrence_prob);
    v
}

/// Converts a 58-feature row (already scaled) into a channel-major TCN window.
pub fn tcn_window(features: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; N_SIGNAL_FEATURES];
    for t in 0..N_LAGS {
        for c in 0..N_SIGNALS {
            w[c * N_LAGS + t] = features[t * N_SIGNALS + c];
        }
    }
    w
}

/// TCN plus the extra-trees readout on latent ++ demographics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnModel {
    pub network: TcnNetwork,
    pub readout: Classifier,
    #[serde(default)]
    pub history: TrainHistory,
}

impl TcnModel {
    fn readout_row(&self, scaled: &[f64], latent: &[f64]) -> Vec<f64> {
        let mut row = latent.to_vec();
        row.extend_from_slice(&scaled[N_SIGNAL_FEATURES..]);
        row
    }

    pub fn predict_proba(&self, scaled: &[f64]) -> Result<Vec<f64>> {
        let out = self.network.forward(&tcn_window(scaled))?;
        self.readout.predict_proba(&self.readout_row(scaled, &out.latent))
    }
}

/// The three pooled abnormal-type models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedSuite {
    /// Pooled scaler and mask for the raw 58 features.
    pub preprocessor: Preprocessor,
    pub rdg: Classifier,
    pub tcn: TcnModel,
    pub irg_scaler: Scaler,
    pub irg: Classifier,
    /// Training-split signal statistics of every pooled patient.
    pub patient_stats: BTreeMap<String, Vec<f64>>,
    pub rdg_search: Option<GridSearch>,
    pub irg_search: Option<GridSearch>,
}

impl GeneralizedSuite {
    pub fn component_proba(&self, component: Component, instance: &Instance, occurrence_prob: f64) -> Result<Vec<f64>> {
        match component {
            Component::Rdg => self.rdg.predict_proba(&self.preprocessor.transform(&instance.features)?),
            Component::Tcn => {
                if instance.features.len() != N_FEATURES {
                    return Err(Error::DimensionMismatch { expected: N_FEATURES, got: instance.features.len() });
                }
                self.tcn.predict_proba(&self.preprocessor.scaler.transform(&instance.features))
            }
            Component::Irg => {
                let stats = self
                    .patient_stats
                    .get(&instance.patient_id)
                    .ok_or_else(|| Error::UnknownPatient(instance.patient_id.clone()))?;
                let v = individual_representation(&instance.features, stats, occurrence_prob);
                self.irg.predict_proba(&self.irg_scaler.transform(&v))
            }
        }
    }

    /// All three model outputs, in [`Component::ALL`] order.
    pub fn all_probas(&self, instance: &Instance, occurrence_prob: f64) -> Result<[Vec<f64>; 3]> {
        Ok([
            self.component_proba(Component::Rdg, instance, occurrence_prob)?,
            self.component_proba(Component::Tcn, instance, occurrence_prob)?,
            self.component_proba(Component::Irg, instance, occurrence_prob)?,
        ])
    }
}

/// Unweighted mean of the active members' three-class vectors.
pub fn soft_vote(probas: &[Vec<f64>; 3], active: ActiveSet) -> Result<Vec<f64>> {
    let members = active.members();
    if members.is_empty() {
        return Err(Error::Config("ensemble active set is empty".into()));
    }
    let mut out = vec![0.0; probas[0].len()];
    for c in &members {
        let k = Component::ALL.iter().position(|x| x == c).expect("known component");
        for (o, p) in out.iter_mut().zip(&probas[k]) {
            *o += p;
        }
    }
    let n = members.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Ensemble argmax; equal probabilities resolve by class priority.
pub fn ensemble_class(probs: &[f64]) -> BpsdClass {
    // abnormal index order is priority order, and argmax keeps the lowest index
    BpsdClass::from_abnormal_index(argmax(probs)).expect("three-class vector")
}

pub fn ensemble_predict(
    suite: &GeneralizedSuite,
    instance: &Instance,
    occurrence_prob: f64,
    active: ActiveSet,
) -> Result<Vec<f64>> {
    let members = active.members();
    if members.is_empty() {
        return Err(Error::Config("ensemble active set is empty".into()));
    }
    let mut probas: [Vec<f64>; 3] = Default::default();
    for (k, c) in Component::ALL.iter().enumerate() {
        probas[k] =
            if members.contains(c) { suite.component_proba(*c, instance, occurrence_prob)? } else { vec![0.0; 3] };
    }
    soft_vote(&probas, active)
}

/// Composition of the two stages for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageOutput {
    pub occurrence_prob: f64,
    pub ensemble_probs: Vec<f64>,
    pub final_class: BpsdClass,
}

impl TwoStageOutput {
    /// Four-class scores: `1 - p` for Normal, `p * e_c` for each abnormal class.
    pub fn scores4(&self) -> [f64; 4] {
        let p = self.occurrence_prob;
        [1.0 - p, p * self.ensemble_probs[0], p * self.ensemble_probs[1], p * self.ensemble_probs[2]]
    }
}

pub fn compose(occurrence_prob: f64, threshold: f64, ensemble_probs: Vec<f64>) -> TwoStageOutput {
    let final_class = if occurrence_prob >= threshold { ensemble_class(&ensemble_probs) } else { BpsdClass::Normal };
    TwoStageOutput { occurrence_prob, ensemble_probs, final_class }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStagePredictor {
    pub personalized: BTreeMap<String, PersonalizedModel>,
    pub suite: GeneralizedSuite,
    pub active: ActiveSet,
}

impl TwoStagePredictor {
    pub fn with_active(&self, active: ActiveSet) -> TwoStagePredictor {
        TwoStagePredictor { active, ..self.clone() }
    }

    pub fn personalized_for(&self, patient_id: &str) -> Result<&PersonalizedModel> {
        self.personalized.get(patient_id).ok_or_else(|| Error::UnknownPatient(patient_id.to_string()))
    }

    pub fn predict(&self, instance: &Instance) -> Result<TwoStageOutput> {
        let model = self.personalized_for(&instance.patient_id)?;
        let p = model.occurrence_prob(&instance.features)?;
        let ens = ensemble_predict(&self.suite, instance, p, self.active)?;
        Ok(compose(p, model.threshold, ens))
    }
}

pub fn two_stage_predict(predictor: &TwoStagePredictor, instance: &Instance) -> Result<BpsdClass> {
    predictor.predict(instance).map(|o| o.final_class)
}

/// Out-of-sample occurrence probabilities for one patient's training rows:
/// chronological blocks, each scored by a model fit on the other blocks.
/// Blocks whose complement lacks both outcomes get [`UNMODELED_OCCURRENCE`].
fn crossfit_occurrence(train: &[Instance], cfg: &FrameworkConfig) -> Result<Vec<f64>> {
    let k = cfg.irg_crossfit_folds.min(train.len()).max(1);
    let mut out = vec![UNMODELED_OCCURRENCE; train.len()];
    for f in 0..k {
        let lo = f * train.len() / k;
        let hi = (f + 1) * train.len() / k;
        let rest: Vec<Instance> = train[..lo].iter().chain(&train[hi..]).cloned().collect();
        match train_personalized(&rest, cfg) {
            Ok(model) => {
                for (o, inst) in out[lo..hi].iter_mut().zip(&train[lo..hi]) {
                    *o = model.occurrence_prob(&inst.features)?;
                }
            }
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Training-side result for a whole cohort.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub predictor: TwoStagePredictor,
    /// Patients without a personalized model, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn abnormal_label(i: &Instance) -> usize {
    i.label4.abnormal_index().expect("abnormal instance")
}

fn backbone_for(
    cfg: &FrameworkConfig,
    kind: BackboneKind,
    data: &Dataset,
    fold_of_row: &[usize],
    seed: u64,
    tune: bool,
) -> Result<(BackboneParams, Option<GridSearch>)> {
    if !tune {
        return Ok((kind.default_params(seed), None));
    }
    let search = grid_search(data, fold_of_row, cfg.cv_folds, &kind.grid(seed), seed)?;
    Ok((search.best.clone(), Some(search)))
}

fn fold_rows(rows: &[&Instance], plan: &SplitPlan) -> Vec<usize> {
    rows.iter().map(|i| plan.fold_of_patient.get(&i.patient_id).copied().unwrap_or(0)).collect()
}

/// Fits the generalized suite on the pooled abnormal training rows.
/// `occurrence` maps each split's patient to out-of-sample occurrence
/// probabilities of its training rows.
pub fn train_generalized(
    splits: &[PatientSplit],
    occurrence: &BTreeMap<String, Vec<f64>>,
    plan: &SplitPlan,
    cfg: &FrameworkConfig,
) -> Result<GeneralizedSuite> {
    ensure_trainable(splits.iter().flat_map(|s| &s.train), "train_generalized")?;
    let pooled: Vec<&Instance> = splits.iter().flat_map(|s| &s.train).filter(|i| i.occurred).collect();
    let labels: Vec<usize> = pooled.iter().map(|i| abnormal_label(i)).collect();
    let mut present = labels.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Degenerate(format!(
            "pooled abnormal training data has {} class(es); need at least 2",
            present.len()
        )));
    }
    let folds = fold_rows(&pooled, plan);

    // G1: backbone on the scaled raw features
    let rdg_seed = cfg.seed_for(2);
    let raw: Vec<&[f64]> = pooled.iter().map(|i| i.features.as_slice()).collect();
    let preprocessor = Preprocessor::fit(&raw, &labels, cfg.selection, rdg_seed)?;
    let x_rdg = raw.iter().map(|r| preprocessor.transform(r)).collect::<Result<Vec<_>>>()?;
    let rdg_data = Dataset::from_rows_with_classes(&x_rdg, labels.clone(), 3)?;
    let (rdg_params, rdg_search) = backbone_for(cfg, cfg.backbone, &rdg_data, &folds, rdg_seed, cfg.tune_generalized)?;
    let rdg = fit_balanced(&x_rdg, &labels, 3, &rdg_params, rdg_seed)?;

    // G2: TCN on scaled windows, extra-trees readout on latent ++ demographics
    let scaled: Vec<Vec<f64>> = raw.iter().map(|r| preprocessor.scaler.transform(r)).collect();
    let windows: Vec<Vec<f64>> = scaled.iter().map(|s| tcn_window(s)).collect();
    let tcn_cfg = TcnConfig { seed: cfg.seed_for(3), ..cfg.tcn.clone() };
    let (network, history) = tcn::train(TcnNetwork::new(tcn_cfg)?, &windows, &labels)?;
    let latents = network.extract_latent(&windows)?;
    let readout_rows: Vec<Vec<f64>> = latents
        .iter()
        .zip(&scaled)
        .map(|(l, s)| {
            let mut r = l.clone();
            r.extend_from_slice(&s[N_SIGNAL_FEATURES..]);
            r
        })
        .collect();
    let readout_seed = cfg.seed_for(4);
    let readout = fit_balanced(
        &readout_rows,
        &labels,
        3,
        &BackboneParams::Forest(ForestParams::extra_trees(readout_seed)),
        readout_seed,
    )?;

    // G3: backbone on individual representations
    let irg_seed = cfg.seed_for(5);
    let patient_stats: BTreeMap<String, Vec<f64>> =
        splits.iter().map(|s| (s.patient_id.clone(), patient_signal_stats(&s.train))).collect();
    let mut irg_rows = Vec::with_capacity(pooled.len());
    for s in splits {
        let probs = occurrence.get(&s.patient_id);
        for (k, inst) in s.train.iter().enumerate() {
            if inst.occurred {
                let p = probs.map_or(UNMODELED_OCCURRENCE, |v| v[k]);
                irg_rows.push(individual_representation(&inst.features, &patient_stats[&s.patient_id], p));
            }
        }
    }
    let irg_scaler = Scaler::fit_rows(irg_rows.iter().map(Vec::as_slice))?;
    let x_irg: Vec<Vec<f64>> = irg_rows.iter().map(|r| irg_scaler.transform(r)).collect();
    let irg_data = Dataset::from_rows_with_classes(&x_irg, labels.clone(), 3)?;
    let (irg_params, irg_search) = backbone_for(cfg, cfg.backbone, &irg_data, &folds, irg_seed, cfg.tune_generalized)?;
    let irg = fit_balanced(&x_irg, &labels, 3, &irg_params, irg_seed)?;

    Ok(GeneralizedSuite {
        preprocessor,
        rdg,
        tcn: TcnModel { network, readout, history },
        irg_scaler,
        irg,
        patient_stats,
        rdg_search,
        irg_search,
    })
}

/// Trains every stage on the training splits. Patients whose training split
/// lacks one outcome get no personalized model and are reported in `skipped`.
pub fn train_two_stage(splits: &[PatientSplit], plan: &SplitPlan, cfg: &FrameworkConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let results = par::map(splits, |s| -> Result<Option<(PersonalizedModel, Vec<f64>)>> {
        match train_personalized(&s.train, cfg) {
            Ok(model) => Ok(Some((model, crossfit_occurrence(&s.train, cfg)?))),
            Err(Error::Degenerate(_)) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut personalized = BTreeMap::new();
    let mut occurrence = BTreeMap::new();
    let mut skipped = Vec::new();
    for (s, r) in splits.iter().zip(results) {
        match r? {
            Some((model, probs)) => {
                personalized.insert(s.patient_id.clone(), model);
                occurrence.insert(s.patient_id.clone(), probs);
            }
            None => {
                let n_abn = s.train.iter().filter(|i| i.occurred).count();
                let reason = if n_abn == 0 {
                    "no abnormal training instances".to_string()
                } else {
                    "no normal training instances".to_string()
                };
                log::warn!("skipping personalized model for {}: {reason}", s.patient_id);
                skipped.push((s.patient_id.clone(), reason));
            }
        }
    }
    if personalized.is_empty() {
        return Err(Error::Degenerate("no patient has both outcomes in training".into()));
    }
    let suite = train_generalized(splits, &occurrence, plan, cfg)?;
    Ok(TrainOutcome { predictor: TwoStagePredictor { personalized, suite, active: cfg.ensemble }, skipped })
}

/// Pooled four-class model on the raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionalBaseline {
    pub preprocessor: Preprocessor,
    pub classifier: Classifier,
    pub search: Option<GridSearch>,
}

impl ConventionalBaseline {
    pub fn predict_proba(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.classifier.predict_proba(&self.preprocessor.transform(features)?)
    }
}

/// Extra-trees on all pooled training rows with the four-class label.
pub fn train_conventional_baseline(
    train: &[Instance],
    plan: &SplitPlan,
    cfg: &FrameworkConfig,
) -> Result<ConventionalBaseline> {
    ensure_trainable(train, "train_conventional_baseline")?;
    let labels: Vec<usize> = train.iter().map(|i| i.label4.index()).collect();
    let mut present = labels.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Degenerate("baseline training data has fewer than 2 classes".into()));
    }
    let seed = cfg.seed_for(6);
    let rows: Vec<&[f64]> = train.iter().map(|i| i.features.as_slice()).collect();
    let preprocessor = Preprocessor::fit(&rows, &labels, cfg.selection, seed)?;
    let x = rows.iter().map(|r| preprocessor.transform(r)).collect::<Result<Vec<_>>>()?;
    let data = Dataset::from_rows_with_classes(&x, labels.clone(), 4)?;
    let refs: Vec<&Instance> = train.iter().collect();
    // patients outside the abnormal pool fall back to a hash-derived fold
    let folds: Vec<usize> = refs
        .iter()
        .map(|i| {
            plan.fold_of_patient
                .get(&i.patient_id)
                .copied()
                .unwrap_or_else(|| (rng::hash_str(&i.patient_id) % cfg.cv_folds as u64) as usize)
        })
        .collect();
    let (params, search) = backbone_for(cfg, BackboneKind::ExtraTrees, &data, &folds, seed, cfg.tune_baseline)?;
    let classifier = fit_balanced(&x, &labels, 4, &params, seed)?;
    Ok(ConventionalBaseline { preprocessor, classifier, search })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::SplitTag;
    use chrono::{Duration, TimeZone, Utc};
    use rand::Rng;

    fn instance(pid: &str, k: usize, label: BpsdClass, rng: &mut impl Rng) -> Instance {
        let shift = label.index() as f64;
        let mut features: Vec<f64> = (0..N_SIGNAL_FEATURES)
            .map(|j| rng.gen_range(-1.0..1.0) + if j % N_SIGNALS == label.index() { 3.0 * shift.min(1.0) } else { 0.0 })
            .collect();
        features.extend_from_slice(&[78.0, 1.0, 6.0]);
        Instance {
            patient_id: pid.into(),
            t: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap() + Duration::minutes(15 * k as i64),
            features,
            label4: label,
            occurred: label.is_abnormal(),
            split: SplitTag::Train,
        }
    }

    fn small_cfg() -> FrameworkConfig {
        FrameworkConfig {
            tcn: TcnConfig { hidden_channels: 8, latent_dim: 16, epochs: 3, ..TcnConfig::default() },
            tune_generalized: false,
            tune_baseline: false,
            ..FrameworkConfig::default()
        }
    }

    #[test]
    fn active_set_parsing() {
        assert_eq!(ActiveSet::parse("rdg,irg,tcn").unwrap(), ActiveSet::ALL);
        assert_eq!(ActiveSet::parse("rdg").unwrap().members(), vec![Component::Rdg]);
        assert!(ActiveSet::parse("").is_err());
        assert!(ActiveSet::parse("rdg,xyz").is_err());
        assert_eq!(ActiveSet::ABLATION[2].label(), "{RDG, IRG}");
        assert_eq!(ActiveSet::ABLATION[3].to_list(), "rdg,tcn,irg");
    }

    #[test]
    fn soft_vote_examples() {
        let v = vec![0.2, 0.5, 0.3];
        let same = soft_vote(&[v.clone(), v.clone(), v.clone()], ActiveSet::ALL).unwrap();
        assert!(same.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-15));
        let one_hot = [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let avg = soft_vote(&one_hot, ActiveSet::ALL).unwrap();
        assert!(avg.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(ensemble_class(&avg), BpsdClass::Hyperactivity);
        let single = soft_vote(&one_hot, ActiveSet::ABLATION[0]).unwrap();
        assert_eq!(single, one_hot[0]);
        let none = ActiveSet { rdg: false, tcn: false, irg: false };
        assert!(soft_vote(&one_hot, none).is_err());
    }

    #[test]
    fn gating_and_threshold_boundary() {
        let e = vec![0.1, 0.8, 0.1];
        assert_eq!(compose(0.1, 0.5, e.clone()).final_class, BpsdClass::Normal);
        assert_eq!(compose(0.9, 0.5, e.clone()).final_class, BpsdClass::Psychosis);
        assert_eq!(compose(0.5, 0.5, e.clone()).final_class, BpsdClass::Psychosis);
        let s = compose(0.9, 0.5, e).scores4();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_layout_matches_instance_accessor() {
        let mut r = rng::stream(1, &[]);
        let inst = instance("a", 0, BpsdClass::Normal, &mut r);
        let w = tcn_window(&inst.features);
        for lag in 0..N_LAGS {
            for c in 0..N_SIGNALS {
                assert_eq!(w[c * N_LAGS + (N_LAGS - 1 - lag)], inst.signal(lag, c));
            }
        }
    }

    #[test]
    fn personalized_requires_both_outcomes() {
        let mut r = rng::stream(2, &[]);
        let normal: Vec<Instance> = (0..20).map(|k| instance("a", k, BpsdClass::Normal, &mut r)).collect();
        assert!(matches!(train_personalized(&normal, &small_cfg()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn personalized_rejects_test_rows() {
        let mut r = rng::stream(2, &[]);
        let mut rows: Vec<Instance> = (0..20)
            .map(|k| instance("a", k, if k % 4 == 0 { BpsdClass::Psychosis } else { BpsdClass::Normal }, &mut r))
            .collect();
        rows[3].split = SplitTag::Test;
        assert!(matches!(train_personalized(&rows, &small_cfg()), Err(Error::Leakage { .. })));
    }

    #[test]
    fn renamed_patient_gets_identical_model() {
        let mut r = rng::stream(3, &[]);
        let rows: Vec<Instance> = (0..40)
            .map(|k| instance("a", k, if k % 5 == 0 { BpsdClass::Hyperactivity } else { BpsdClass::Normal }, &mut r))
            .collect();
        let renamed: Vec<Instance> = rows.iter().cloned().map(|i| Instance { patient_id: "b".into(), ..i }).collect();
        let cfg = small_cfg();
        let a = train_personalized(&rows, &cfg).unwrap();
        let b = train_personalized(&renamed, &cfg).unwrap();
        assert_eq!(a.classifier, b.classifier);
        assert_eq!(a.preprocessor, b.preprocessor);
    }

    #[test]
    fn generalized_needs_two_abnormal_classes() {
        let mut r = rng::stream(4, &[]);
        let train: Vec<Instance> = (0..30)
            .map(|k| instance("a", k, if k % 3 == 0 { BpsdClass::Psychosis } else { BpsdClass::Normal }, &mut r))
            .collect();
        let split = PatientSplit { patient_id: "a".into(), train, test: Vec::new() };
        let plan = crate::evaluation::splits::make_splits(std::slice::from_ref(&split.train), 5, 0);
        let err = train_generalized(&[split], &BTreeMap::new(), &plan, &small_cfg()).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn end_to_end_on_separable_toy_data() {
        let mut r = rng::stream(5, &[]);
        let mut splits = Vec::new();
        for p in 0..4 {
            let pid = format!("p{p}");
            let all: Vec<Instance> = (0..80)
                .map(|k| {
                    let label = if k % 4 == 0 { BpsdClass::ABNORMAL[(k / 4) % 3] } else { BpsdClass::Normal };
                    instance(&pid, k, label, &mut r)
                })
                .collect();
            splits.push(all);
        }
        let plan = crate::evaluation::splits::make_splits(&splits, 2, 0);
        let parts: Vec<PatientSplit> = splits.iter().map(|s| plan.apply(s).unwrap()).collect();
        let cfg = FrameworkConfig { cv_folds: 2, ..small_cfg() };
        let out = train_two_stage(&parts, &plan, &cfg).unwrap();
        assert_eq!(out.predictor.personalized.len(), 4);
        assert!(out.skipped.is_empty());
        let mut correct = 0;
        let mut total = 0;
        for s in &parts {
            for inst in &s.test {
                let o = out.predictor.predict(inst).unwrap();
                assert_eq!(o.final_class == BpsdClass::Normal, o.occurrence_prob < cfg.threshold);
                correct += (o.final_class == inst.label4) as usize;
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 > 0.8, "{correct}/{total}");
        let singleton = out.predictor.with_active(ActiveSet::ABLATION[0]);
        let inst = &parts[0].test[0];
        let p = singleton.personalized_for(&inst.patient_id).unwrap().occurrence_prob(&inst.features).unwrap();
        assert_eq!(
            singleton.predict(inst).unwrap().ensemble_probs,
            singleton.suite.component_proba(Component::Rdg, inst, p).unwrap()
        );

        let pooled: Vec<Instance> = parts.iter().flat_map(|s| s.train.clone()).collect();
        let base = train_conventional_baseline(&pooled, &plan, &cfg).unwrap();
        assert_eq!(base.predict_proba(&parts[0].test[0].features).unwrap().len(), 4);
    }
}
