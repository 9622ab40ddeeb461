use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::featurize::{Instance, SplitTag};
use crate::rng;

pub const MIN_INSTANCES: usize = 10;
pub const TRAIN_FRACTION_NUM: usize = 7;
pub const TRAIN_FRACTION_DEN: usize = 10;

/// Chronological per-patient boundary plus a patient-grouped fold assignment
/// of the pooled generalized training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    /// Number of leading (earliest) instances that form each patient's training split.
    pub n_train: BTreeMap<String, usize>,
    /// First test instant per patient.
    pub boundary: BTreeMap<String, DateTime<Utc>>,
    /// CV fold of every patient in the pooled abnormal training data.
    pub fold_of_patient: BTreeMap<String, usize>,
    pub n_folds: usize,
    pub excluded: Vec<(String, String)>,
}

/// Train and test parts of one patient's time-ordered instances, tagged.
#[derive(Debug, Clone)]
pub struct PatientSplit {
    pub patient_id: String,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl SplitPlan {
    pub fn includes(&self, patient_id: &str) -> bool {
        self.n_train.contains_key(patient_id)
    }

    /// Splits one patient's instances (must be time ordered) and tags them.
    pub fn apply(&self, instances: &[Instance]) -> Option<PatientSplit> {
        let pid = &instances.first()?.patient_id;
        let n_train = *self.n_train.get(pid)?;
        let tag = |xs: &[Instance], split| xs.iter().cloned().map(|i| Instance { split, ..i }).collect();
        Some(PatientSplit {
            patient_id: pid.clone(),
            train: tag(&instances[..n_train], SplitTag::Train),
            test: tag(&instances[n_train..], SplitTag::Test),
        })
    }
}

/// Assigns groups to `n_folds` folds so that each fold holds whole groups and
/// per-class counts stay close to `total / n_folds`. Groups are visited largest
/// first after a seeded shuffle; each goes to the fold whose class counts it
/// moves least away from target (lowest fold index on ties).
pub fn grouped_stratified_folds(
    group_counts: &BTreeMap<String, Vec<usize>>,
    n_folds: usize,
    seed: u64,
) -> BTreeMap<String, usize> {
    let n_classes = group_counts.values().map(Vec::len).max().unwrap_or(0);
    let mut totals = vec![0usize; n_classes];
    for counts in group_counts.values() {
        for (t, c) in totals.iter_mut().zip(counts) {
            *t += c;
        }
    }
    let target: Vec<f64> = totals.iter().map(|&t| t as f64 / n_folds as f64).collect();
    let mut groups: Vec<&String> = group_counts.keys().collect();
    groups.shuffle(&mut rng::stream(seed, &[0xF01D]));
    groups.sort_by_key(|g| std::cmp::Reverse(group_counts[*g].iter().sum::<usize>()));

    let mut fold_counts = vec![vec![0usize; n_classes]; n_folds];
    let mut out = BTreeMap::new();
    for g in groups {
        let counts = &group_counts[g];
        let cost = |f: usize| -> f64 {
            (0..n_classes)
                .map(|c| {
                    let before = fold_counts[f][c] as f64 - target[c];
                    let after = before + counts.get(c).copied().unwrap_or(0) as f64;
                    after * after - before * before
                })
                .sum()
        };
        let best =
            (0..n_folds).min_by(|&a, &b| cost(a).total_cmp(&cost(b)).then(a.cmp(&b))).expect("at least one fold");
        for (fc, c) in fold_counts[best].iter_mut().zip(counts) {
            *fc += c;
        }
        out.insert(g.clone(), best);
    }
    out
}

/// Builds the split plan. `patients` holds each patient's time-ordered instances.
/// Patients with fewer than [`MIN_INSTANCES`] instances are excluded.
pub fn make_splits(patients: &[Vec<Instance>], n_folds: usize, seed: u64) -> SplitPlan {
    let mut plan = SplitPlan {
        seed,
        n_train: BTreeMap::new(),
        boundary: BTreeMap::new(),
        fold_of_patient: BTreeMap::new(),
        n_folds,
        excluded: Vec::new(),
    };
    let mut abnormal_counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for instances in patients {
        let Some(first) = instances.first() else { continue };
        let pid = first.patient_id.clone();
        if instances.len() < MIN_INSTANCES {
            plan.excluded.push((pid, format!("only {} instances (< {MIN_INSTANCES})", instances.len())));
            continue;
        }
        debug_assert!(instances.windows(2).all(|w| w[0].t <= w[1].t));
        let n_train = instances.len() * TRAIN_FRACTION_NUM / TRAIN_FRACTION_DEN;
        plan.boundary.insert(pid.clone(), instances[n_train].t);
        plan.n_train.insert(pid.clone(), n_train);
        let mut counts = vec![0usize; 3];
        for i in &instances[..n_train] {
            if let Some(a) = i.label4.abnormal_index() {
                counts[a] += 1;
            }
        }
        if counts.iter().sum::<usize>() > 0 {
            abnormal_counts.insert(pid, counts);
        }
    }
    plan.fold_of_patient = grouped_stratified_folds(&abnormal_counts, n_folds, seed);
    plan
}
