//! Patients, signals, BPSD events, CSV ingestion and 15-minute grid alignment.
//!
//! Files:
//! - `signals.csv`: `patient_id,timestamp,signal,value`
//! - `events.csv`: `patient_id,timestamp,bpsd_class`
//! - `demographics.csv`: `patient_id,age,sex,education_years`
//!
//! Timestamps are ISO-8601 with an explicit offset in files and UTC in memory.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SLOT_MINUTES: i64 = 15;
pub const SLOT_SECONDS: i64 = SLOT_MINUTES * 60;
pub const N_SIGNALS: usize = 11;

/// Offset used when writing timestamps (UTC+8).
pub const LOCAL_OFFSET_SECONDS: i32 = 8 * 3600;

pub const SIGNALS_FILE: &str = "signals.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const DEMOGRAPHICS_FILE: &str = "demographics.csv";

/// Measured signals in canonical order. `index()` is stable across the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignalType {
    Hr,
    Hrv,
    Sys,
    Dia,
    Stress,
    Temp,
    Oxygen,
    Steps,
    Calories,
    TossTurn,
    SleepQuality,
}

impl SignalType {
    pub const ALL: [SignalType; N_SIGNALS] = [
        SignalType::Hr,
        SignalType::Hrv,
        SignalType::Sys,
        SignalType::Dia,
        SignalType::Stress,
        SignalType::Temp,
        SignalType::Oxygen,
        SignalType::Steps,
        SignalType::Calories,
        SignalType::TossTurn,
        SignalType::SleepQuality,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SignalType::Hr => "HR",
            SignalType::Hrv => "HRV",
            SignalType::Sys => "SYS",
            SignalType::Dia => "DIA",
            SignalType::Stress => "Stress",
            SignalType::Temp => "Temp",
            SignalType::Oxygen => "Oxygen",
            SignalType::Steps => "Steps",
            SignalType::Calories => "Calories",
            SignalType::TossTurn => "TossTurn",
            SignalType::SleepQuality => "SleepQuality",
        }
    }

    pub fn from_name(name: &str) -> Option<SignalType> {
        SignalType::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Sleep variables are recorded once per day rather than per slot.
    pub fn is_sleep(self) -> bool {
        matches!(self, SignalType::TossTurn | SignalType::SleepQuality)
    }
}

impl fmt::Display for SignalType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Four-way label. Declaration order is the label index (Normal = 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BpsdClass {
    Normal,
    Hyperactivity,
    Psychosis,
    PhysicalBehavior,
}

impl BpsdClass {
    pub const ALL: [BpsdClass; 4] =
        [BpsdClass::Normal, BpsdClass::Hyperactivity, BpsdClass::Psychosis, BpsdClass::PhysicalBehavior];

    /// The abnormal classes, indexed 0..3 in the three-class generalized stage.
    pub const ABNORMAL: [BpsdClass; 3] = [BpsdClass::Hyperactivity, BpsdClass::Psychosis, BpsdClass::PhysicalBehavior];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<BpsdClass> {
        BpsdClass::ALL.get(i).copied()
    }

    pub fn is_abnormal(self) -> bool {
        self != BpsdClass::Normal
    }

    /// Index within [`BpsdClass::ABNORMAL`]; `None` for Normal.
    pub fn abnormal_index(self) -> Option<usize> {
        self.index().checked_sub(1)
    }

    pub fn from_abnormal_index(i: usize) -> Option<BpsdClass> {
        BpsdClass::ABNORMAL.get(i).copied()
    }

    /// Tie-break rank: lower wins. Hyperactivity > Psychosis > PhysicalBehavior > Normal.
    pub fn priority(self) -> u8 {
        match self {
            BpsdClass::Hyperactivity => 0,
            BpsdClass::Psychosis => 1,
            BpsdClass::PhysicalBehavior => 2,
            BpsdClass::Normal => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BpsdClass::Normal => "Normal",
            BpsdClass::Hyperactivity => "Hyperactivity",
            BpsdClass::Psychosis => "Psychosis",
            BpsdClass::PhysicalBehavior => "PhysicalBehavior",
        }
    }

    pub fn from_name(name: &str) -> Option<BpsdClass> {
        BpsdClass::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for BpsdClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn code(self) -> f64 {
        match self {
            Sex::Female => 0.0,
            Sex::Male => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: u32,
    pub sex: Sex,
    pub education_years: u32,
}

impl Demographics {
    pub fn new(age: u32, sex: Sex, education_years: u32) -> Result<Self> {
        if age > 130 {
            return Err(Error::Data(format!("age {age} outside [0, 130]")));
        }
        if education_years > 30 {
            return Err(Error::Data(format!("education_years {education_years} outside [0, 30]")));
        }
        Ok(Self { age, sex, education_years })
    }

    pub fn as_features(&self) -> [f64; 3] {
        [self.age as f64, self.sex.code(), self.education_years as f64]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalSample {
    pub timestamp: DateTime<Utc>,
    pub signal: SignalType,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpsdEvent {
    pub timestamp: DateTime<Utc>,
    pub class: BpsdClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub demographics: Demographics,
    pub samples: Vec<SignalSample>,
    pub events: Vec<BpsdEvent>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn get(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == patient_id)
    }
}

/// Start of the 15-minute slot containing `t`.
pub fn floor_to_slot(t: DateTime<Utc>) -> DateTime<Utc> {
    let secs = t.timestamp();
    let floored = secs.div_euclid(SLOT_SECONDS) * SLOT_SECONDS;
    DateTime::from_timestamp(floored, 0).expect("in-range timestamp")
}

fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| format!("bad timestamp `{s}`: {e}"))
}

pub fn format_timestamp(t: DateTime<Utc>, offset_seconds: i32) -> String {
    let offset = FixedOffset::east_opt(offset_seconds).expect("valid offset");
    t.with_timezone(&offset).to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn open_csv(path: &Path, expected: &[&str]) -> Result<csv::Reader<File>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::MalformedRow {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{}`", expected.join(",")),
        });
    }
    Ok(rdr)
}

fn row_error(path: &Path, record: &csv::StringRecord, message: String) -> Error {
    Error::MalformedRow { path: path.to_path_buf(), line: record.position().map_or(0, |p| p.line()), message }
}

/// Reads the three cohort files. Patients are returned in demographics order.
pub fn load_cohort(signals_path: &Path, events_path: &Path, demographics_path: &Path) -> Result<Cohort> {
    let mut patients: Vec<PatientRecord> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();

    let mut rdr = open_csv(demographics_path, &["patient_id", "age", "sex", "education_years"])?;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(row_error(demographics_path, &rec, "expected 4 fields".into()));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(row_error(demographics_path, &rec, "empty patient_id".into()));
        }
        let age: u32 =
            rec[1].parse().map_err(|_| row_error(demographics_path, &rec, format!("bad age `{}`", &rec[1])))?;
        let sex = match &rec[2] {
            "F" => Sex::Female,
            "M" => Sex::Male,
            other => return Err(row_error(demographics_path, &rec, format!("bad sex `{other}`"))),
        };
        let edu: u32 = rec[3]
            .parse()
            .map_err(|_| row_error(demographics_path, &rec, format!("bad education_years `{}`", &rec[3])))?;
        let demographics =
            Demographics::new(age, sex, edu).map_err(|e| row_error(demographics_path, &rec, e.to_string()))?;
        if by_id.contains_key(&id) {
            return Err(Error::DuplicatePatient(id));
        }
        by_id.insert(id.clone(), patients.len());
        patients.push(PatientRecord { patient_id: id, demographics, samples: Vec::new(), events: Vec::new() });
    }

    let mut rdr = open_csv(signals_path, &["patient_id", "timestamp", "signal", "value"])?;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(row_error(signals_path, &rec, "expected 4 fields".into()));
        }
        let idx = *by_id
            .get(&rec[0])
            .ok_or_else(|| row_error(signals_path, &rec, format!("unknown patient_id `{}`", &rec[0])))?;
        let timestamp = parse_timestamp(&rec[1]).map_err(|m| row_error(signals_path, &rec, m))?;
        let signal = SignalType::from_name(&rec[2])
            .ok_or_else(|| row_error(signals_path, &rec, format!("unknown signal `{}`", &rec[2])))?;
        let value: f64 =
            rec[3].parse().map_err(|_| row_error(signals_path, &rec, format!("bad value `{}`", &rec[3])))?;
        if !value.is_finite() {
            return Err(row_error(signals_path, &rec, "non-finite value".into()));
        }
        patients[idx].samples.push(SignalSample { timestamp, signal, value });
    }

    let mut rdr = open_csv(events_path, &["patient_id", "timestamp", "bpsd_class"])?;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(row_error(events_path, &rec, "expected 3 fields".into()));
        }
        let idx = *by_id
            .get(&rec[0])
            .ok_or_else(|| row_error(events_path, &rec, format!("unknown patient_id `{}`", &rec[0])))?;
        let timestamp = parse_timestamp(&rec[1]).map_err(|m| row_error(events_path, &rec, m))?;
        let class = match BpsdClass::from_name(&rec[2]) {
            Some(c) if c.is_abnormal() => c,
            _ => {
                return Err(row_error(
                    events_path,
                    &rec,
                    format!("bpsd_class `{}` not in {{Hyperactivity,Psychosis,PhysicalBehavior}}", &rec[2]),
                ))
            }
        };
        patients[idx].events.push(BpsdEvent { timestamp, class });
    }

    for p in &mut patients {
        // stable: equal timestamps keep file order
        p.events.sort_by_key(|e| e.timestamp);
    }
    Ok(Cohort { patients })
}

/// Loads `signals.csv`, `events.csv` and `demographics.csv` from one directory.
pub fn load_cohort_dir(dir: &Path) -> Result<Cohort> {
    load_cohort(&dir.join(SIGNALS_FILE), &dir.join(EVENTS_FILE), &dir.join(DEMOGRAPHICS_FILE))
}

/// Writes the three cohort files into `out_dir` (created if missing).
pub fn write_cohort(cohort: &Cohort, out_dir: &Path) -> Result<()> {
    write_cohort_with_offset(cohort, out_dir, LOCAL_OFFSET_SECONDS)
}

pub fn write_cohort_with_offset(cohort: &Cohort, out_dir: &Path, offset_seconds: i32) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;

    let mut w = std::io::BufWriter::new(File::create(out_dir.join(DEMOGRAPHICS_FILE))?);
    writeln!(w, "patient_id,age,sex,education_years")?;
    for p in &cohort.patients {
        let d = &p.demographics;
        let sex = match d.sex {
            Sex::Female => "F",
            Sex::Male => "M",
        };
        writeln!(w, "{},{},{},{}", p.patient_id, d.age, sex, d.education_years)?;
    }
    w.flush()?;

    let mut w = std::io::BufWriter::new(File::create(out_dir.join(SIGNALS_FILE))?);
    writeln!(w, "patient_id,timestamp,signal,value")?;
    for p in &cohort.patients {
        for s in &p.samples {
            writeln!(w, "{},{},{},{}", p.patient_id, format_timestamp(s.timestamp, offset_seconds), s.signal, s.value)?;
        }
    }
    w.flush()?;

    let mut w = std::io::BufWriter::new(File::create(out_dir.join(EVENTS_FILE))?);
    writeln!(w, "patient_id,timestamp,bpsd_class")?;
    for p in &cohort.patients {
        for e in &p.events {
            writeln!(w, "{},{},{}", p.patient_id, format_timestamp(e.timestamp, offset_seconds), e.class)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-slot signal vectors on a fixed 15-minute grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalGrid {
    pub patient_id: String,
    pub grid_start: DateTime<Utc>,
    /// Slot `k` covers `[grid_start + 15k min, grid_start + 15(k+1) min)`.
    pub cells: Vec<Option<[f64; N_SIGNALS]>>,
}

impl SignalGrid {
    pub fn slot_start(&self, k: usize) -> DateTime<Utc> {
        self.grid_start + Duration::seconds(SLOT_SECONDS * k as i64)
    }

    pub fn slot_end(&self, k: usize) -> DateTime<Utc> {
        self.slot_start(k + 1)
    }

    pub fn n_present(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Converts present cells back into one sample per signal at each slot start.
    pub fn to_samples(&self) -> Vec<SignalSample> {
        let mut out = Vec::new();
        for (k, cell) in self.cells.iter().enumerate() {
            if let Some(values) = cell {
                for s in SignalType::ALL {
                    out.push(SignalSample { timestamp: self.slot_start(k), signal: s, value: values[s.index()] });
                }
            }
        }
        out
    }
}

/// Fallback values for the sleep variables when a patient has none at all.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SleepFallback {
    pub toss_turn: Option<f64>,
    pub sleep_quality: Option<f64>,
}

impl SleepFallback {
    fn get(&self, s: SignalType) -> Option<f64> {
        match s {
            SignalType::TossTurn => self.toss_turn,
            SignalType::SleepQuality => self.sleep_quality,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct RunningMean {
    mean: f64,
    n: u32,
}

impl RunningMean {
    // incremental form keeps the mean of identical values exact
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.mean += (x - self.mean) / self.n as f64;
    }
}

pub(crate) fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Per-day means of each sleep variable for one patient.
fn daily_sleep_means(record: &PatientRecord) -> [BTreeMap<NaiveDate, f64>; 2] {
    let mut acc: [BTreeMap<NaiveDate, RunningMean>; 2] = Default::default();
    for s in &record.samples {
        let slot = match s.signal {
            SignalType::TossTurn => 0,
            SignalType::SleepQuality => 1,
            _ => continue,
        };
        acc[slot].entry(s.timestamp.date_naive()).or_default().push(s.value);
    }
    acc.map(|m| m.into_iter().map(|(d, r)| (d, r.mean)).collect())
}

/// Cohort-wide median of per-day sleep values, used when a patient has none.
pub fn population_sleep_medians(cohort: &Cohort) -> SleepFallback {
    let mut toss = Vec::new();
    let mut quality = Vec::new();
    for p in &cohort.patients {
        let [t, q] = daily_sleep_means(p);
        toss.extend(t.into_values());
        quality.extend(q.into_values());
    }
    SleepFallback { toss_turn: median(&mut toss), sleep_quality: median(&mut quality) }
}

/// Aligns a record onto the 15-minute grid with no population fallback.
pub fn align_to_grid(record: &PatientRecord) -> SignalGrid {
    align_to_grid_with(record, &SleepFallback::default())
}

/// Floors every sample to its slot and averages same-slot duplicates. A cell is
/// present only when all nine slot-local signals were observed in it; the two
/// sleep variables come from the day's mean, else the patient's median over
/// days, else `fallback`.
pub fn align_to_grid_with(record: &PatientRecord, fallback: &SleepFallback) -> SignalGrid {
    let Some(first) = record.samples.iter().map(|s| s.timestamp).min() else {
        return SignalGrid {
            patient_id: record.patient_id.clone(),
            grid_start: DateTime::UNIX_EPOCH,
            cells: Vec::new(),
        };
    };
    let last = record.samples.iter().map(|s| s.timestamp).max().unwrap();
    let grid_start = floor_to_slot(first);
    let n_slots = ((floor_to_slot(last) - grid_start).num_seconds() / SLOT_SECONDS) as usize + 1;
    let slot_of = |t: DateTime<Utc>| ((floor_to_slot(t) - grid_start).num_seconds() / SLOT_SECONDS) as usize;

    let mut acc: Vec<[RunningMean; N_SIGNALS]> = vec![[RunningMean::default(); N_SIGNALS]; n_slots];
    let mut touched = vec![false; n_slots];
    for s in &record.samples {
        let k = slot_of(s.timestamp);
        touched[k] = true;
        if !s.signal.is_sleep() {
            acc[k][s.signal.index()].push(s.value);
        }
    }

    let daily = daily_sleep_means(record);
    let patient_medians: Vec<Option<f64>> =
        daily.iter().map(|m| median(&mut m.values().copied().collect::<Vec<_>>())).collect();
    let sleep_signals = [SignalType::TossTurn, SignalType::SleepQuality];

    let mut cells = vec![None; n_slots];
    for k in 0..n_slots {
        if !touched[k] {
            continue;
        }
        let mut values = [0.0; N_SIGNALS];
        let mut complete = true;
        for s in SignalType::ALL.iter().filter(|s| !s.is_sleep()) {
            let m = acc[k][s.index()];
            if m.n == 0 {
                complete = false;
                break;
            }
            values[s.index()] = m.mean;
        }
        if !complete {
            continue;
        }
        let day = (grid_start + Duration::seconds(SLOT_SECONDS * k as i64)).date_naive();
        for (j, s) in sleep_signals.iter().enumerate() {
            let v = daily[j].get(&day).copied().or(patient_medians[j]).or(fallback.get(*s));
            match v {
                Some(v) => values[s.index()] = v,
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            cells[k] = Some(values);
        }
    }

    SignalGrid { patient_id: record.patient_id.clone(), grid_start, cells }
}

/// Aligns every patient, using cohort-wide sleep medians as the last fallback.
pub fn align_cohort(cohort: &Cohort) -> Vec<SignalGrid> {
    let fallback = population_sleep_medians(cohort);
    crate::par::map(&cohort.patients, |p| align_to_grid_with(p, &fallback))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn ts(h: u32, m: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 3, 4, h, m, 0).unwrap()
    }

    fn full_slot(t: DateTime<Utc>, base: f64) -> Vec<SignalSample> {
        SignalType::ALL
            .iter()
            .map(|&signal| SignalSample { timestamp: t, signal, value: base + signal.index() as f64 })
            .collect()
    }

    fn record(samples: Vec<SignalSample>) -> PatientRecord {
        PatientRecord {
            patient_id: "p1".into(),
            demographics: Demographics::new(80, Sex::Female, 6).unwrap(),
            samples,
            events: Vec::new(),
        }
    }

    #[test]
    fn canonical_signal_order() {
        let names: Vec<_> = SignalType::ALL.iter().map(|s| s.name()).collect();
        assert_eq!(
            names,
            ["HR", "HRV", "SYS", "DIA", "Stress", "Temp", "Oxygen", "Steps", "Calories", "TossTurn", "SleepQuality"]
        );
        for (i, s) in SignalType::ALL.iter().enumerate() {
            assert_eq!(s.index(), i);
            assert_eq!(SignalType::from_name(s.name()), Some(*s));
        }
    }

    #[test]
    fn class_priority_and_indices() {
        let mut by_priority = BpsdClass::ALL.to_vec();
        by_priority.sort_by_key(|c| c.priority());
        assert_eq!(
            by_priority,
            [BpsdClass::Hyperactivity, BpsdClass::Psychosis, BpsdClass::PhysicalBehavior, BpsdClass::Normal]
        );
        for c in BpsdClass::ABNORMAL {
            assert_eq!(BpsdClass::from_abnormal_index(c.abnormal_index().unwrap()), Some(c));
        }
        assert_eq!(BpsdClass::Normal.abnormal_index(), None);
    }

    #[test]
    fn demographics_ranges() {
        assert!(Demographics::new(131, Sex::Male, 3).is_err());
        assert!(Demographics::new(70, Sex::Male, 31).is_err());
        assert!(Demographics::new(130, Sex::Male, 30).is_ok());
    }

    #[test]
    fn floor_semantics() {
        assert_eq!(floor_to_slot(ts(8, 7)), ts(8, 0));
        assert_eq!(floor_to_slot(ts(8, 15)), ts(8, 15));
        assert_eq!(floor_to_slot(ts(8, 14) + Duration::seconds(59)), ts(8, 0));
    }

    #[test]
    fn sample_lands_in_containing_slot() {
        let g = align_to_grid(&record(full_slot(ts(8, 7), 1.0)));
        assert_eq!(g.grid_start, ts(8, 0));
        assert_eq!(g.cells.len(), 1);
        assert!(g.cells[0].is_some());
    }

    #[test]
    fn same_slot_duplicates_are_averaged() {
        let mut samples = full_slot(ts(9, 0), 0.0);
        samples.retain(|s| s.signal != SignalType::Hr);
        for v in [70.0, 74.0] {
            samples.push(SignalSample { timestamp: ts(9, 10), signal: SignalType::Hr, value: v });
        }
        let g = align_to_grid(&record(samples));
        assert_eq!(g.cells[0].unwrap()[SignalType::Hr.index()], 72.0);
    }

    #[test]
    fn missing_non_sleep_signal_gives_absent_cell() {
        let mut samples = full_slot(ts(8, 0), 0.0);
        samples.extend(full_slot(ts(8, 15), 0.0));
        samples.extend(full_slot(ts(8, 30), 0.0));
        // slot 1 loses HRV
        samples.retain(|s| !(s.timestamp == ts(8, 15) && s.signal == SignalType::Hrv));
        let g = align_to_grid(&record(samples.clone()));

        // brute force: a slot is complete iff all nine slot-local signals appear
        let mut expected = 0;
        for k in 0..3 {
            let start = ts(8, 0) + Duration::minutes(15 * k);
            let end = start + Duration::minutes(15);
            let ok = SignalType::ALL
                .iter()
                .filter(|s| !s.is_sleep())
                .all(|sig| samples.iter().any(|s| s.signal == *sig && s.timestamp >= start && s.timestamp < end));
            expected += ok as usize;
        }
        assert_eq!(expected, 2);
        assert_eq!(g.n_present(), expected);
        assert!(g.cells[1].is_none());
    }

    #[test]
    fn sleep_values_are_broadcast_per_day() {
        // day 1: sleep recorded once at 08:00; slot 08:30 has no sleep samples
        let mut samples = full_slot(ts(8, 0), 0.0);
        let mut later = full_slot(ts(8, 30), 5.0);
        later.retain(|s| !s.signal.is_sleep());
        samples.extend(later);
        let g = align_to_grid(&record(samples));
        let c = g.cells[2].unwrap();
        assert_eq!(c[SignalType::TossTurn.index()], 9.0);
        assert_eq!(c[SignalType::SleepQuality.index()], 10.0);
    }

    #[test]
    fn sleep_gap_day_uses_patient_median_then_fallback() {
        let day2 = Utc.with_ymd_and_hms(2024, 3, 5, 8, 0, 0).unwrap();
        let day3 = Utc.with_ymd_and_hms(2024, 3, 6, 8, 0, 0).unwrap();
        let mut samples = full_slot(ts(8, 0), 0.0); // toss 9, quality 10
        samples.extend(full_slot(day2, 2.0)); // toss 11, quality 12
        let mut d3 = full_slot(day3, 0.0);
        d3.retain(|s| !s.signal.is_sleep());
        samples.extend(d3);
        let g = align_to_grid(&record(samples.clone()));
        let last = g.cells.last().unwrap().unwrap();
        assert_eq!(last[SignalType::TossTurn.index()], 10.0);
        assert_eq!(last[SignalType::SleepQuality.index()], 11.0);

        samples.retain(|s| !s.signal.is_sleep());
        let g = align_to_grid(&record(samples.clone()));
        assert_eq!(g.n_present(), 0);
        let fb = SleepFallback { toss_turn: Some(1.5), sleep_quality: Some(2.5) };
        let g = align_to_grid_with(&record(samples), &fb);
        assert_eq!(g.n_present(), 3);
        assert_eq!(g.cells.last().unwrap().unwrap()[SignalType::SleepQuality.index()], 2.5);
    }

    #[test]
    fn empty_record_gives_empty_grid() {
        assert!(align_to_grid(&record(Vec::new())).cells.is_empty());
    }

    fn arb_samples() -> impl Strategy<Value = Vec<SignalSample>> {
        prop::collection::vec((0i64..(6 * 3600), 0usize..N_SIGNALS, -50.0f64..50.0), 0..200).prop_map(|v| {
            v.into_iter()
                .map(|(sec, s, value)| SignalSample {
                    timestamp: ts(8, 0) + Duration::seconds(sec),
                    signal: SignalType::ALL[s],
                    value,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn regridding_is_idempotent(samples in arb_samples()) {
            let g = align_to_grid(&record(samples));
            let again = align_to_grid(&record(g.to_samples()));
            let present: Vec<_> = g.cells.iter().flatten().collect();
            let present_again: Vec<_> = again.cells.iter().flatten().collect();
            prop_assert_eq!(present, present_again);
        }

        #[test]
        fn present_cells_bounded_by_touched_slots(samples in arb_samples()) {
            let distinct: std::collections::BTreeSet<_> =
                samples.iter().map(|s| floor_to_slot(s.timestamp)).collect();
            let g = align_to_grid(&record(samples));
            prop_assert!(g.n_present() <= distinct.len());
        }
    }
}
