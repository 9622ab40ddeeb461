//! Run configuration and its on-disk form: flat `key = value` lines grouped
//! under `[section]` headers, `#` comments. Command-line flags are applied as
//! a second file layered over the first.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::featurize::SelectionMode;
use crate::framework::{ActiveSet, FrameworkConfig};
use crate::learners::BackboneKind;
use crate::synthgen::GeneratorConfig;

pub const DEFAULT_SEED: u64 = 42;

/// Parsed `[section] key = value` text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut out = ConfigFile::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(Error::Config(format!("line {}: unterminated section header", n + 1)));
                };
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            if section.is_empty() {
                return Err(Error::Config(format!("line {}: key outside any [section]", n + 1)));
            }
            out.set(&section, k.trim(), v.trim());
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.into());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn sections(&self) -> &BTreeMap<String, BTreeMap<String, String>> {
        &self.sections
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.get(section).is_some_and(|s| !s.is_empty())
    }

    /// Entries of `other` replace ours.
    pub fn overlay(&mut self, other: &ConfigFile) {
        for (s, kv) in &other.sections {
            for (k, v) in kv {
                self.set(s, k, v.clone());
            }
        }
    }
}

impl fmt::Display for ConfigFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (s, kv)) in self.sections.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            writeln!(f, "[{s}]")?;
            for (k, v) in kv {
                writeln!(f, "{k} = {v}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Directory holding signals.csv, events.csv and demographics.csv.
    Files(PathBuf),
    Generator(GeneratorConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub framework: FrameworkConfig,
    pub out: Option<PathBuf>,
}

/// Typed reader over one section that rejects unknown keys.
struct Section<'a> {
    name: &'a str,
    entries: BTreeMap<String, String>,
}

impl<'a> Section<'a> {
    fn new(file: &ConfigFile, name: &'a str) -> Self {
        Self { name, entries: file.sections.get(name).cloned().unwrap_or_default() }
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some(raw) = self.entries.remove(key) else { return Ok(None) };
        raw.parse().map(Some).map_err(|_| Error::Config(format!("[{}] {key}: cannot parse `{raw}`", self.name)))
    }

    fn take_with<T>(&mut self, key: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
        self.entries.remove(key).map(|raw| f(&raw)).transpose()
    }

    fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::Config(format!("[{}] unknown key `{k}`", self.name))),
            None => Ok(()),
        }
    }
}

fn parse_selection(s: &str) -> Result<SelectionMode> {
    match s.split_once(':') {
        None if s == "none" => Ok(SelectionMode::None),
        None if s == "variance" => Ok(SelectionMode::Variance),
        None if s == "importance" => Ok(SelectionMode::Importance { fraction: 0.8 }),
        Some(("importance", q)) => q
            .parse()
            .map(|fraction| SelectionMode::Importance { fraction })
            .map_err(|_| Error::Config(format!("bad importance fraction `{q}`"))),
        _ => Err(Error::Config(format!("unknown feature selection `{s}`"))),
    }
}

fn selection_string(m: SelectionMode) -> String {
    match m {
        SelectionMode::None => "none".into(),
        SelectionMode::Variance => "variance".into(),
        SelectionMode::Importance { fraction } => format!("importance:{fraction}"),
    }
}

fn parse_pair(s: &str) -> Result<(u32, u32)> {
    let bad = || Error::Config(format!("expected `lo-hi`, got `{s}`"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_concentration(s: &str) -> Result<Option<f64>> {
    if s == "none" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Config(format!("bad class_mix_concentration `{s}`")))
}

fn parse_mix(s: &str) -> Result<[f64; 4]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad class_mix `{s}`")))?;
    parts.try_into().map_err(|_| Error::Config("class_mix needs four proportions".into()))
}

impl RunConfig {
    /// Resolves a layered config into a run configuration. Omitted seeds are
    /// filled with [`DEFAULT_SEED`]; each filled value is reported in the
    /// returned notes so callers can echo it.
    pub fn resolve(file: &ConfigFile) -> Result<(RunConfig, Vec<String>)> {
        for s in file.sections.keys() {
            if !["data", "generator", "model", "tcn", "output"].contains(&s.as_str()) {
                return Err(Error::Config(format!("unknown section [{s}]")));
            }
        }
        let mut notes = Vec::new();

        let mut data = Section::new(file, "data");
        let dir: Option<PathBuf> = data.take("dir")?;
        data.finish()?;
        let data = match dir {
            Some(_) if file.has_section("generator") => {
                return Err(Error::Config("give either [data] dir or [generator] settings, not both".into()))
            }
            Some(d) => DataSource::Files(d),
            None => {
                let mut g = Section::new(file, "generator");
                let mut cfg = GeneratorConfig::default();
                match g.take("seed")? {
                    Some(s) => cfg.seed = s,
                    None => {
                        cfg.seed = DEFAULT_SEED;
                        notes.push(format!("generator.seed = {DEFAULT_SEED} (default)"));
                    }
                }
                if let Some(v) = g.take("patients")? {
                    cfg.n_patients = v;
                }
                if let Some(v) = g.take("days")? {
                    cfg.days = v;
                }
                if let Some(v) = g.take("wear_days_per_week")? {
                    cfg.wear_days_per_week = v;
                }
                if let Some(v) = g.take("wear_start_hour")? {
                    cfg.wear_start_hour = v;
                }
                if let Some(v) = g.take("wear_end_hour")? {
                    cfg.wear_end_hour = v;
                }
                if let Some(v) = g.take_with("class_mix", parse_mix)? {
                    cfg.class_mix = v;
                }
                if let Some(v) = g.take_with("prodromal_lead_minutes", parse_pair)? {
                    cfg.prodromal_lead_minutes = v;
                }
                if let Some(v) = g.take("drift_scale")? {
                    cfg.drift_scale = v;
                }
                if let Some(v) = g.take::<NaiveDate>("start_date")? {
                    cfg.start_date = v;
                }
                if let Some(v) = g.take("utc_offset_seconds")? {
                    cfg.utc_offset_seconds = v;
                }
                if let Some(v) = g.take("sleep_missing_prob")? {
                    cfg.sleep_missing_prob = v;
                }
                if let Some(v) = g.take_with("class_mix_concentration", parse_concentration)? {
                    cfg.class_mix_concentration = v;
                }
                if let Some(v) = g.take("baseline_spread")? {
                    cfg.baseline_spread = v;
                }
                g.finish()?;
                cfg.validate()?;
                DataSource::Generator(cfg)
            }
        };

        let mut m = Section::new(file, "model");
        let mut fw = FrameworkConfig::default();
        match m.take("seed")? {
            Some(s) => fw.seed = s,
            None => {
                fw.seed = DEFAULT_SEED;
                notes.push(format!("model.seed = {DEFAULT_SEED} (default)"));
            }
        }
        if let Some(b) = m.take_with("backbone", |s| {
            BackboneKind::parse(s)
                .ok_or_else(|| Error::Config(format!("unknown backbone `{s}` (expected ERT, RF or LR)")))
        })? {
            fw.backbone = b;
        }
        if let Some(v) = m.take("threshold")? {
            fw.threshold = v;
        }
        if let Some(v) = m.take_with("ensemble", ActiveSet::parse)? {
            fw.ensemble = v;
        }
        if let Some(v) = m.take_with("selection", parse_selection)? {
            fw.selection = v;
        }
        if let Some(v) = m.take("cv_folds")? {
            fw.cv_folds = v;
        }
        if let Some(v) = m.take("tune_generalized")? {
            fw.tune_generalized = v;
        }
        if let Some(v) = m.take("tune_baseline")? {
            fw.tune_baseline = v;
        }
        if let Some(v) = m.take("irg_crossfit_folds")? {
            fw.irg_crossfit_folds = v;
        }
        m.finish()?;

        let mut t = Section::new(file, "tcn");
        if let Some(v) = t.take("epochs")? {
            fw.tcn.epochs = v;
        }
        if let Some(v) = t.take("batch_size")? {
            fw.tcn.batch_size = v;
        }
        if let Some(v) = t.take("learning_rate")? {
            fw.tcn.learning_rate = v;
        }
        if let Some(v) = t.take("hidden_channels")? {
            fw.tcn.hidden_channels = v;
        }
        if let Some(v) = t.take("latent_dim")? {
            fw.tcn.latent_dim = v;
        }
        if let Some(v) = t.take("dropout")? {
            fw.tcn.dropout = v;
        }
        if let Some(v) = t.take("class_weighted")? {
            fw.tcn.class_weighted = v;
        }
        t.finish()?;
        if fw.tcn.batch_size == 0 || !(0.0..1.0).contains(&fw.tcn.dropout) {
            return Err(Error::Config("tcn batch_size must be positive and dropout in [0, 1)".into()));
        }
        fw.validate()?;

        let mut o = Section::new(file, "output");
        let out = o.take("dir")?;
        o.finish()?;

        Ok((RunConfig { data, framework: fw, out }, notes))
    }

    /// Fully explicit form; resolving it yields `self` again.
    pub fn to_config_file(&self) -> ConfigFile {
        let mut f = ConfigFile::default();
        match &self.data {
            DataSource::Files(d) => f.set("data", "dir", d.display().to_string()),
            DataSource::Generator(g) => {
                f.set("generator", "seed", g.seed.to_string());
                f.set("generator", "patients", g.n_patients.to_string());
                f.set("generator", "days", g.days.to_string());
                f.set("generator", "wear_days_per_week", g.wear_days_per_week.to_string());
                f.set("generator", "wear_start_hour", g.wear_start_hour.to_string());
                f.set("generator", "wear_end_hour", g.wear_end_hour.to_string());
                let mix: Vec<String> = g.class_mix.iter().map(f64::to_string).collect();
                f.set("generator", "class_mix", mix.join(","));
                let (lo, hi) = g.prodromal_lead_minutes;
                f.set("generator", "prodromal_lead_minutes", format!("{lo}-{hi}"));
                f.set("generator", "drift_scale", g.drift_scale.to_string());
                f.set("generator", "start_date", g.start_date.to_string());
                f.set("generator", "utc_offset_seconds", g.utc_offset_seconds.to_string());
                f.set("generator", "sleep_missing_prob", g.sleep_missing_prob.to_string());
                let conc = g.class_mix_concentration.map_or_else(|| "none".to_string(), |k| k.to_string());
                f.set("generator", "class_mix_concentration", conc);
                f.set("generator", "baseline_spread", g.baseline_spread.to_string());
            }
        }
        let fw = &self.framework;
        f.set("model", "seed", fw.seed.to_string());
        f.set("model", "backbone", fw.backbone.name());
        f.set("model", "threshold", fw.threshold.to_string());
        f.set("model", "ensemble", fw.ensemble.to_list());
        f.set("model", "selection", selection_string(fw.selection));
        f.set("model", "cv_folds", fw.cv_folds.to_string());
        f.set("model", "tune_generalized", fw.tune_generalized.to_string());
        f.set("model", "tune_baseline", fw.tune_baseline.to_string());
        f.set("model", "irg_crossfit_folds", fw.irg_crossfit_folds.to_string());
        f.set("tcn", "epochs", fw.tcn.epochs.to_string());
        f.set("tcn", "batch_size", fw.tcn.batch_size.to_string());
        f.set("tcn", "learning_rate", fw.tcn.learning_rate.to_string());
        f.set("tcn", "hidden_channels", fw.tcn.hidden_channels.to_string());
        f.set("tcn", "latent_dim", fw.tcn.latent_dim.to_string());
        f.set("tcn", "dropout", fw.tcn.dropout.to_string());
        f.set("tcn", "class_weighted", fw.tcn.class_weighted.to_string());
        if let Some(o) = &self.out {
            f.set("output", "dir", o.display().to_string());
        }
        f
    }
}
