//! Model bundle directory and run manifest.
//!
//! ```text
//! <bundle>/
//!   manifest.json        data hash, seeds, resolved config, artifact paths
//!   config.ini           resolved run configuration
//!   split_plan.json
//!   personalized/<patient_id>.json
//!   suite.json
//!   baseline.json
//!   data/                cohort CSVs (only when the run generated its data)
//! ```
//!
//! Every JSON artifact carries a `format_version`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{load_cohort_dir, write_cohort_with_offset, Cohort, DEMOGRAPHICS_FILE, EVENTS_FILE, SIGNALS_FILE};
use crate::config::{ConfigFile, DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::splits::SplitPlan;
use crate::framework::{ConventionalBaseline, GeneralizedSuite, PersonalizedModel, TwoStagePredictor};
use crate::pipeline::{self, PreparedData, TrainedModels};
use crate::synthgen::generate_cohort;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.ini";
pub const SPLIT_PLAN_FILE: &str = "split_plan.json";
pub const SUITE_FILE: &str = "suite.json";
pub const BASELINE_FILE: &str = "baseline.json";
pub const PERSONALIZED_DIR: &str = "personalized";
pub const DATA_DIR: &str = "data";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPatient {
    pub patient_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Generator seed, when the data was generated.
    pub generator: Option<u64>,
    pub model: u64,
    pub derived: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub model_version: String,
    pub created_at: String,
    /// SHA-256 over the three cohort CSV files.
    pub data_hash: String,
    /// Cohort directory; relative paths are relative to the bundle.
    pub data_dir: String,
    pub seeds: Seeds,
    pub config: BTreeMap<String, BTreeMap<String, String>>,
    pub personalized: BTreeMap<String, String>,
    pub skipped: Vec<SkippedPatient>,
    pub excluded: Vec<SkippedPatient>,
    pub suite_path: String,
    pub baseline_path: String,
    pub split_plan_path: String,
}

impl RunManifest {
    /// Copy with the creation timestamp blanked, for reproducibility checks.
    pub fn without_timestamp(&self) -> RunManifest {
        RunManifest { created_at: String::new(), ..self.clone() }
    }
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    format_version: u32,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    let text = serde_json::to_string(&Versioned { format_version: FORMAT_VERSION, body })?;
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let v: Versioned<T> = serde_json::from_str(&text)?;
    if v.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion { found: v.format_version, expected: FORMAT_VERSION });
    }
    Ok(v.body)
}

#[derive(Serialize, Deserialize)]
struct ModelBody<T> {
    model: T,
}

/// SHA-256 (hex) over the cohort CSVs in `dir`, each prefixed by its name.
pub fn hash_data_dir(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [SIGNALS_FILE, EVENTS_FILE, DEMOGRAPHICS_FILE] {
        let bytes = fs::read(dir.join(name))
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.join(name).display())))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// A loaded or freshly trained bundle.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub manifest: RunManifest,
    pub config: RunConfig,
    pub plan: SplitPlan,
    pub predictor: TwoStagePredictor,
    pub baseline: ConventionalBaseline,
}

impl Bundle {
    pub fn model_version(&self) -> &str {
        &self.manifest.model_version
    }

    /// Absolute location of the cohort the bundle was trained on.
    pub fn data_dir(&self, bundle_dir: &Path) -> PathBuf {
        let d = PathBuf::from(&self.manifest.data_dir);
        if d.is_absolute() {
            d
        } else {
            bundle_dir.join(d)
        }
    }
}

fn file_name_for(patient_id: &str) -> Result<String> {
    if patient_id.is_empty() || !patient_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Error::Data(format!("patient_id `{patient_id}` is not usable as a file name")));
    }
    Ok(format!("{PERSONALIZED_DIR}/{patient_id}.json"))
}

/// Writes every artifact of `bundle` under `dir` (the manifest last).
pub fn save_bundle(dir: &Path, bundle: &Bundle) -> Result<()> {
    fs::create_dir_all(dir.join(PERSONALIZED_DIR))?;
    for (pid, model) in &bundle.predictor.personalized {
        let rel = bundle
            .manifest
            .personalized
            .get(pid)
            .ok_or_else(|| Error::Data(format!("manifest lacks a path for `{pid}`")))?;
        write_json(&dir.join(rel), &ModelBody { model })?;
    }
    #[derive(Serialize)]
    struct SuiteBody<'a> {
        model: &'a GeneralizedSuite,
        active: crate::framework::ActiveSet,
    }
    write_json(
        &dir.join(&bundle.manifest.suite_path),
        &SuiteBody { model: &bundle.predictor.suite, active: bundle.predictor.active },
    )?;
    write_json(&dir.join(&bundle.manifest.baseline_path), &ModelBody { model: &bundle.baseline })?;
    write_json(&dir.join(&bundle.manifest.split_plan_path), &ModelBody { model: &bundle.plan })?;
    fs::write(dir.join(CONFIG_FILE), bundle.config.to_config_file().to_string())?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&bundle.manifest)?)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion { found: manifest.format_version, expected: FORMAT_VERSION });
    }
    Ok(manifest)
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let manifest = load_manifest(dir)?;
    let mut file = ConfigFile::default();
    for (s, kv) in &manifest.config {
        for (k, v) in kv {
            file.set(s, k, v.clone());
        }
    }
    let (config, _) = RunConfig::resolve(&file)?;
    let mut personalized = BTreeMap::new();
    for (pid, rel) in &manifest.personalized {
        let body: ModelBody<PersonalizedModel> = read_json(&dir.join(rel))?;
        if &body.model.patient_id != pid {
            return Err(Error::Data(format!("{rel} holds patient `{}`", body.model.patient_id)));
        }
        personalized.insert(pid.clone(), body.model);
    }
    #[derive(Deserialize)]
    struct SuiteBody {
        model: GeneralizedSuite,
        active: crate::framework::ActiveSet,
    }
    let suite: SuiteBody = read_json(&dir.join(&manifest.suite_path))?;
    let baseline: ModelBody<ConventionalBaseline> = read_json(&dir.join(&manifest.baseline_path))?;
    let plan: ModelBody<SplitPlan> = read_json(&dir.join(&manifest.split_plan_path))?;
    Ok(Bundle {
        config,
        plan: plan.model,
        predictor: TwoStagePredictor { personalized, suite: suite.model, active: suite.active },
        baseline: baseline.model,
        manifest,
    })
}

/// Cohort of a run: generated into `<out>/data/` or loaded from the given directory.
/// Returns the cohort and the manifest's `data_dir` entry.
pub fn materialize_data(config: &RunConfig, out: &Path) -> Result<(Cohort, PathBuf, String)> {
    match &config.data {
        DataSource::Generator(g) => {
            let cohort = generate_cohort(g)?;
            let dir = out.join(DATA_DIR);
            write_cohort_with_offset(&cohort, &dir, g.utc_offset_seconds)?;
            // reload so the models see exactly what the CSVs hold
            let cohort = load_cohort_dir(&dir)?;
            Ok((cohort, dir, DATA_DIR.to_string()))
        }
        DataSource::Files(d) => {
            let cohort = load_cohort_dir(d)?;
            let abs = fs::canonicalize(d).unwrap_or_else(|_| d.clone());
            Ok((cohort, d.clone(), abs.display().to_string()))
        }
    }
}

/// Current UTC time, RFC 3339.
pub fn timestamp_now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl Bundle {
    /// Skipped patients as `(patient_id, reason)` pairs.
    pub fn skipped(&self) -> Vec<(String, String)> {
        self.manifest.skipped.iter().map(|s| (s.patient_id.clone(), s.reason.clone())).collect()
    }
}

/// Assembles the manifest and bundle for trained models.
pub fn assemble(
    config: &RunConfig,
    data: &PreparedData,
    models: TrainedModels,
    data_hash: String,
    data_dir: String,
    created_at: String,
) -> Result<Bundle> {
    let fw = &config.framework;
    let personalized = models
        .outcome
        .predictor
        .personalized
        .keys()
        .map(|pid| Ok((pid.clone(), file_name_for(pid)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let to_skipped = |v: &[(String, String)]| {
        v.iter().map(|(p, r)| SkippedPatient { patient_id: p.clone(), reason: r.clone() }).collect::<Vec<_>>()
    };
    let manifest = RunManifest {
        format_version: FORMAT_VERSION,
        model_version: format!("{}+{}", env!("CARGO_PKG_VERSION"), &data_hash[..12]),
        created_at,
        data_hash,
        data_dir,
        seeds: Seeds {
            generator: match &config.data {
                DataSource::Generator(g) => Some(g.seed),
                DataSource::Files(_) => None,
            },
            model: fw.seed,
            derived: fw.component_seeds(),
        },
        config: RunConfig { out: None, ..config.clone() }.to_config_file().sections().clone(),
        personalized,
        skipped: to_skipped(&models.outcome.skipped),
        excluded: to_skipped(&data.plan.excluded),
        suite_path: SUITE_FILE.into(),
        baseline_path: BASELINE_FILE.into(),
        split_plan_path: SPLIT_PLAN_FILE.into(),
    };
    Ok(Bundle {
        manifest,
        config: config.clone(),
        plan: data.plan.clone(),
        predictor: models.outcome.predictor,
        baseline: models.baseline,
    })
}

/// Generates or loads the data, trains every stage, and writes the bundle to `out`.
pub fn train_to_dir(config: &RunConfig, out: &Path, created_at: String) -> Result<Bundle> {
    let (cohort, data_path, data_dir) = materialize_data(config, out)?;
    let data_hash = hash_data_dir(&data_path)?;
    let data = pipeline::prepare(&cohort, &config.framework);
    let models = pipeline::train(&data, &config.framework)?;
    let bundle = assemble(config, &data, models, data_hash, data_dir, created_at)?;
    save_bundle(out, &bundle)?;
    Ok(bundle)
}

/// Reloads the bundle's cohort, checking it against the recorded hash, and
/// rebuilds the instances with the stored split plan.
pub fn reload_data(bundle: &Bundle, bundle_dir: &Path) -> Result<PreparedData> {
    let dir = bundle.data_dir(bundle_dir);
    let hash = hash_data_dir(&dir)?;
    if hash != bundle.manifest.data_hash {
        return Err(Error::Data(format!(
            "data in {} does not match the bundle (hash {} vs {})",
            dir.display(),
            &hash[..12],
            &bundle.manifest.data_hash[..12]
        )));
    }
    let cohort = load_cohort_dir(&dir)?;
    let mut data = pipeline::prepare(&cohort, &bundle.config.framework);
    if data.plan != bundle.plan {
        return Err(Error::Data("recomputed split plan differs from the stored one".into()));
    }
    data.plan = bundle.plan.clone();
    Ok(data)
}
