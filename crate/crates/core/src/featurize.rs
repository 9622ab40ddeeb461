//! Lag windowing, horizon labeling, normalization, oversampling and feature selection.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Duration, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{format_timestamp, BpsdClass, BpsdEvent, Demographics, SignalGrid, N_SIGNALS};
use crate::error::{Error, Result};
use crate::learners::{Dataset, ForestParams};
use crate::rng;

pub const N_LAGS: usize = 5;
pub const N_SIGNAL_FEATURES: usize = N_SIGNALS * N_LAGS;
pub const N_FEATURES: usize = N_SIGNAL_FEATURES + 3;
pub const HORIZON: Duration = Duration::hours(4);

/// Which side of a train/test split an instance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum SplitTag {
    #[default]
    Unassigned,
    Train,
    Test,
}

/// One labeled window. `features` holds, for lags 4..=0 (oldest first), the 11
/// signals in canonical order, then age, sex, education_years.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub patient_id: String,
    pub t: DateTime<Utc>,
    pub features: Vec<f64>,
    pub label4: BpsdClass,
    pub occurred: bool,
    #[serde(default)]
    pub split: SplitTag,
}

impl Instance {
    /// Signal value at `lag` slots before `t` (0 = current slot).
    pub fn signal(&self, lag: usize, signal: usize) -> f64 {
        self.features[(N_LAGS - 1 - lag) * N_SIGNALS + signal]
    }

    pub fn signal_features(&self) -> &[f64] {
        &self.features[..N_SIGNAL_FEATURES]
    }
}

static GUARD_CHECKS: AtomicU64 = AtomicU64::new(0);

/// Rejects any test-tagged instance. Every fit entry point calls this.
pub fn ensure_trainable<'a, I>(instances: I, context: &str) -> Result<()>
where
    I: IntoIterator<Item = &'a Instance>,
{
    GUARD_CHECKS.fetch_add(1, Ordering::Relaxed);
    if instances.into_iter().any(|i| i.split == SplitTag::Test) {
        return Err(Error::Leakage { context: context.to_string() });
    }
    Ok(())
}

/// Number of leakage-guard checks performed by this process so far.
pub fn guard_checks() -> u64 {
    GUARD_CHECKS.load(Ordering::Relaxed)
}

/// Class of the earliest event in `(t_end, t_end + 4h]`, rare class first on ties.
pub fn horizon_label(events: &[BpsdEvent], t_end: DateTime<Utc>) -> BpsdClass {
    let start = events.partition_point(|e| e.timestamp <= t_end);
    let limit = t_end + HORIZON;
    let Some(first) = events.get(start).filter(|e| e.timestamp <= limit) else {
        return BpsdClass::Normal;
    };
    events[start..]
        .iter()
        .take_while(|e| e.timestamp == first.timestamp)
        .map(|e| e.class)
        .min_by_key(|c| c.priority())
        .unwrap_or(BpsdClass::Normal)
}

/// Emits an instance for slot `t` iff slots `t-4..=t` are all present.
/// `events` must be sorted by timestamp.
pub fn build_instances(grid: &SignalGrid, events: &[BpsdEvent], demographics: &Demographics) -> Vec<Instance> {
    let demo = demographics.as_features();
    let mut out = Vec::new();
    for k in (N_LAGS - 1)..grid.cells.len() {
        let window = &grid.cells[k + 1 - N_LAGS..=k];
        if window.iter().any(|c| c.is_none()) {
            continue;
        }
        let mut features = Vec::with_capacity(N_FEATURES);
        for cell in window.iter().flatten() {
            features.extend_from_slice(cell);
        }
        features.extend_from_slice(&demo);
        let label4 = horizon_label(events, grid.slot_end(k));
        out.push(Instance {
            patient_id: grid.patient_id.clone(),
            t: grid.slot_start(k),
            features,
            label4,
            occurred: label4.is_abnormal(),
            split: SplitTag::Unassigned,
        });
    }
    out
}

/// Per-feature z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const CONSTANT_STD: f64 = 1e-12;

impl Scaler {
    /// Population mean/stdev over the given rows.
    pub fn fit_rows<'a, I>(rows: I) -> Result<Scaler>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let Some(first) = rows.first() else {
            return Err(Error::Degenerate("cannot fit a scaler on an empty set".into()));
        };
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: r.len() });
            }
            for (m, x) in mean.iter_mut().zip(r.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in &rows {
            for ((v, x), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Ok(Scaler { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_constant(&self, j: usize) -> bool {
        self.std[j] < CONSTANT_STD
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, v)| if self.is_constant(j) { 0.0 } else { (v - self.mean[j]) / self.std[j] })
            .collect()
    }

    /// Constant features come back as their training mean.
    pub fn inverse_transform(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(j, v)| if self.is_constant(j) { self.mean[j] } else { v * self.std[j] + self.mean[j] })
            .collect()
    }
}

pub fn fit_scaler(train: &[Instance]) -> Result<Scaler> {
    ensure_trainable(train, "fit_scaler")?;
    Scaler::fit_rows(train.iter().map(|i| i.features.as_slice()))
}

pub fn apply_scaler(scaler: &Scaler, instances: &[Instance]) -> Vec<Instance> {
    instances.iter().map(|i| Instance { features: scaler.transform(&i.features), ..i.clone() }).collect()
}

/// Indices of the originals followed by with-replacement draws from each
/// minority class until every present class matches the majority count.
pub fn oversample_indices(labels: &[usize], seed: u64) -> Vec<usize> {
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let majority = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut out: Vec<usize> = (0..labels.len()).collect();
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut rng = rng::stream(seed, &[0x0a5a, c as u64]);
        for _ in members.len()..majority {
            out.push(members[rng.gen_range(0..members.len())]);
        }
    }
    out
}

/// Balances on the four-class label.
pub fn oversample(train: &[Instance], seed: u64) -> Result<Vec<Instance>> {
    ensure_trainable(train, "oversample")?;
    let labels: Vec<usize> = train.iter().map(|i| i.label4.index()).collect();
    Ok(oversample_indices(&labels, seed).into_iter().map(|i| train[i].clone()).collect())
}

/// Retained-feature mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub keep: Vec<bool>,
}

impl FeatureMask {
    pub fn all(d: usize) -> Self {
        Self { keep: vec![true; d] }
    }

    pub fn n_kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.keep).filter(|(_, k)| **k).map(|(v, _)| *v).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.keep.iter().all(|k| *k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
#[derive(Default)]
pub enum SelectionMode {
    #[default]
    None,
    Variance,
    /// Keep the top `fraction` of features by extra-trees impurity importance.
    Importance {
        fraction: f64,
    },
}

/// Feature mask for rows `x` with class labels `y`.
pub fn select_features_rows(x: &[Vec<f64>], y: &[usize], mode: SelectionMode, seed: u64) -> Result<FeatureMask> {
    let d = x.first().map_or(0, Vec::len);
    let keep = match mode {
        SelectionMode::None => vec![true; d],
        SelectionMode::Variance => {
            let scaler = Scaler::fit_rows(x.iter().map(Vec::as_slice))?;
            (0..d).map(|j| !scaler.is_constant(j)).collect()
        }
        SelectionMode::Importance { fraction } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Config(format!("importance fraction {fraction} outside (0, 1]")));
            }
            let data = Dataset::from_rows(x, y.to_vec())?;
            let forest = crate::learners::fit_forest(&data, &ForestParams::extra_trees(seed))?;
            let imp = forest.feature_importances();
            let n_keep = ((fraction * d as f64).ceil() as usize).clamp(1, d);
            let mut order: Vec<usize> = (0..d).collect();
            // stable sort: equal importances keep lower indices first
            order.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]));
            let mut keep = vec![false; d];
            for &j in order.iter().take(n_keep) {
                keep[j] = true;
            }
            keep
        }
    };
    let mask = FeatureMask { keep };
    if mask.n_kept() == 0 {
        return Err(Error::Degenerate("feature selection would retain no features".into()));
    }
    Ok(mask)
}

/// Fits a mask on training instances using the four-class label.
pub fn select_features(train: &[Instance], mode: SelectionMode, seed: u64) -> Result<FeatureMask> {
    ensure_trainable(train, "select_features")?;
    let x: Vec<Vec<f64>> = train.iter().map(|i| i.features.clone()).collect();
    let y: Vec<usize> = train.iter().map(|i| i.label4.index()).collect();
    select_features_rows(&x, &y, mode, seed)
}

pub fn instances_header() -> String {
    let mut cols = vec!["patient_id".to_string(), "t".to_string()];
    cols.extend((0..N_FEATURES).map(|j| format!("f{j}")));
    cols.push("label4".into());
    cols.push("occurred".into());
    cols.join(",")
}

pub fn write_instances(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    writeln!(w, "{}", instances_header())?;
    for i in instances {
        write!(w, "{},{}", i.patient_id, format_timestamp(i.t, 0))?;
        for v in &i.features {
            write!(w, ",{v}")?;
        }
        writeln!(w, ",{},{}", i.label4, i.occurred)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Vec<Instance>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    let bad = |line: u64, message: String| Error::MalformedRow { path: path.to_path_buf(), line, message };
    if header != instances_header() {
        return Err(bad(1, "unexpected instances header".into()));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != N_FEATURES + 4 {
            return Err(bad(line, format!("expected {} fields", N_FEATURES + 4)));
        }
        let t = DateTime::parse_from_rfc3339(&rec[1])
            .map_err(|e| bad(line, format!("bad timestamp: {e}")))?
            .with_timezone(&Utc);
        let features = (0..N_FEATURES)
            .map(|j| {
                rec[2 + j]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(line, format!("bad feature f{j}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let label4 = BpsdClass::from_name(&rec[2 + N_FEATURES])
            .ok_or_else(|| bad(line, format!("bad label4 `{}`", &rec[2 + N_FEATURES])))?;
        let occurred: bool = rec[3 + N_FEATURES].parse().map_err(|_| bad(line, "bad occurred flag".into()))?;
        if occurred != label4.is_abnormal() {
            return Err(bad(line, "occurred flag disagrees with label4".into()));
        }
        out.push(Instance {
            patient_id: rec[0].to_string(),
            t,
            features,
            label4,
            occurred,
            split: SplitTag::Unassigned,
        });
    }
    Ok(out)
}
