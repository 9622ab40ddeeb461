//! Seeded synthetic cohorts.
//!
//! Each patient gets their own resting baselines (drawn from wide population
//! ranges) and their own noise level per signal. BPSD events are Poisson per
//! wear day and are preceded by a class-specific drift whose size is a multiple
//! of the patient's own noise stdev, ramping linearly over a random lead.
//! Pooled raw values therefore separate classes worse than per-patient views.

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::cohort::{
    BpsdClass, BpsdEvent, Cohort, Demographics, PatientRecord, Sex, SignalSample, SignalType, N_SIGNALS, SLOT_MINUTES,
};
use crate::error::{Error, Result};
use crate::rng;

/// Horizon used when solving event rates; matches the labeling horizon.
const HORIZON_MINUTES: i64 = 240;
const WINDOW_SLOTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub days: usize,
    pub wear_days_per_week: usize,
    /// Local wear window `[start, end)` in whole hours.
    pub wear_start_hour: u32,
    pub wear_end_hour: u32,
    pub seed: u64,
    /// Target label proportions for Normal, Hyperactivity, Psychosis, PhysicalBehavior.
    pub class_mix: [f64; 4],
    pub prodromal_lead_minutes: (u32, u32),
    pub drift_scale: f64,
    pub start_date: NaiveDate,
    pub utc_offset_seconds: i32,
    /// Chance that a wear day has no sleep-variable record.
    pub sleep_missing_prob: f64,
    /// Gamma shape of the per-patient weights over the abnormal classes;
    /// `None` (the default) gives every patient the cohort mix.
    pub class_mix_concentration: Option<f64>,
    /// Width multiplier of the population ranges that patient baselines are drawn from.
    pub baseline_spread: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 30,
            days: 21,
            wear_days_per_week: 4,
            wear_start_hour: 8,
            wear_end_hour: 17,
            seed: 42,
            class_mix: [0.829, 0.011, 0.104, 0.056],
            prodromal_lead_minutes: (60, 180),
            drift_scale: 1.5,
            start_date: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            utc_offset_seconds: crate::cohort::LOCAL_OFFSET_SECONDS,
            sleep_missing_prob: 0.1,
            class_mix_concentration: None,
            baseline_spread: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.class_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_mix.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("class_mix must be proportions summing to 1 (sum {sum})")));
        }
        if !(3..=5).contains(&self.wear_days_per_week) {
            return Err(Error::Config(format!("wear_days_per_week {} outside [3, 5]", self.wear_days_per_week)));
        }
        let (lo, hi) = self.prodromal_lead_minutes;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("prodromal lead range [{lo}, {hi}] minutes is not positive")));
        }
        if self.wear_end_hour <= self.wear_start_hour || self.wear_end_hour > 24 {
            return Err(Error::Config("wear window must be a nonempty range within one day".into()));
        }
        if self.days == 0 {
            return Err(Error::Config("days must be positive".into()));
        }
        if !(self.drift_scale.is_finite() && self.drift_scale >= 0.0) {
            return Err(Error::Config("drift_scale must be finite and nonnegative".into()));
        }
        if self.class_mix_concentration.is_some_and(|k| !(k.is_finite() && k > 0.0)) {
            return Err(Error::Config("class_mix_concentration must be positive".into()));
        }
        if !(self.baseline_spread.is_finite() && self.baseline_spread > 0.0) {
            return Err(Error::Config("baseline_spread must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sleep_missing_prob) {
            return Err(Error::Config("sleep_missing_prob outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn slots_per_day(&self) -> usize {
        ((self.wear_end_hour - self.wear_start_hour) as i64 * 60 / SLOT_MINUTES) as usize
    }

    fn wear_minutes(&self) -> i64 {
        (self.wear_end_hour - self.wear_start_hour) as i64 * 60
    }
}

/// Population ranges for a signal: uniform mean range and uniform stdev range.
struct SignalPrior {
    mean: (f64, f64),
    sd: (f64, f64),
    non_negative: bool,
}

const fn prior(mean: (f64, f64), sd: (f64, f64), non_negative: bool) -> SignalPrior {
    SignalPrior { mean, sd, non_negative }
}

const PRIORS: [SignalPrior; N_SIGNALS] = [
    prior((58.0, 95.0), (3.0, 7.0), false),   // HR
    prior((20.0, 70.0), (4.0, 10.0), true),   // HRV
    prior((105.0, 150.0), (4.0, 9.0), false), // SYS
    prior((60.0, 90.0), (3.0, 6.0), false),   // DIA
    prior((15.0, 60.0), (4.0, 10.0), true),   // Stress
    prior((35.8, 36.9), (0.1, 0.25), false),  // Temp
    prior((93.0, 98.5), (0.5, 1.2), false),   // Oxygen
    prior((60.0, 400.0), (20.0, 80.0), true), // Steps
    prior((15.0, 45.0), (3.0, 8.0), true),    // Calories
    prior((5.0, 30.0), (2.0, 5.0), true),     // TossTurn
    prior((40.0, 90.0), (5.0, 10.0), true),   // SleepQuality
];

/// Per-class drift directions over the canonical signals.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSignature {
    pub class: BpsdClass,
    pub direction: [f64; N_SIGNALS],
}

pub fn episode_signatures() -> [EpisodeSignature; 3] {
    let mut hyper = [0.0; N_SIGNALS];
    hyper[SignalType::Steps.index()] = 1.0;
    hyper[SignalType::Calories.index()] = 1.0;
    hyper[SignalType::Hr.index()] = 0.6;
    let mut psych = [0.0; N_SIGNALS];
    psych[SignalType::Stress.index()] = 1.0;
    psych[SignalType::Hrv.index()] = -1.0;
    let mut phys = [0.0; N_SIGNALS];
    phys[SignalType::Hr.index()] = 1.0;
    phys[SignalType::Temp.index()] = 1.0;
    [
        EpisodeSignature { class: BpsdClass::Hyperactivity, direction: hyper },
        EpisodeSignature { class: BpsdClass::Psychosis, direction: psych },
        EpisodeSignature { class: BpsdClass::PhysicalBehavior, direction: phys },
    ]
}

/// Expected Normal share of windowed instances on a full wear day when events
/// arrive as Poisson(`rate`) per day at uniform minutes of the wear window.
fn expected_normal_share(rate: f64, cfg: &GeneratorConfig) -> f64 {
    let wear = cfg.wear_minutes();
    let slots = cfg.slots_per_day();
    let mut total = 0.0;
    let mut n = 0;
    for j in (WINDOW_SLOTS - 1)..slots {
        let t_end = SLOT_MINUTES * (j as i64 + 1);
        // integer event minutes m with t_end < m <= t_end + horizon, m < wear
        let covered = (wear - 1 - t_end).clamp(0, HORIZON_MINUTES);
        total += (-rate * covered as f64 / wear as f64).exp();
        n += 1;
    }
    total / n as f64
}

/// Events-per-wear-day rate that yields the configured Normal share.
pub fn solve_event_rate(cfg: &GeneratorConfig) -> Result<f64> {
    let target = cfg.class_mix[0];
    if cfg.slots_per_day() < WINDOW_SLOTS {
        return Err(Error::Config("wear window shorter than one instance window".into()));
    }
    let max_rate = cfg.slots_per_day() as f64;
    if target >= 1.0 {
        return Ok(0.0);
    }
    if expected_normal_share(max_rate, cfg) > target {
        return Err(Error::Config(format!(
            "infeasible class_mix: Normal share {target} needs more than {max_rate} events per wear day"
        )));
    }
    let (mut lo, mut hi) = (0.0, max_rate);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_normal_share(mid, cfg) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn wear_day_indices(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::new();
    for week_start in (0..cfg.days).step_by(7) {
        let mut week: Vec<usize> = (week_start..(week_start + 7).min(cfg.days)).collect();
        let k = cfg.wear_days_per_week.min(week.len());
        week.shuffle(rng);
        let mut chosen = week[..k].to_vec();
        chosen.sort_unstable();
        out.extend(chosen);
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..=hi)
}

/// Generates one patient from its own counter-keyed stream.
fn generate_patient(cfg: &GeneratorConfig, index: usize, rate: f64) -> PatientRecord {
    let mut rng = rng::stream(cfg.seed, &[0x5159_4e47, index as u64]);
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    let age = Normal::<f64>::new(77.9, 10.2).unwrap().sample(&mut rng).round().clamp(50.0, 100.0) as u32;
    let sex = if rng.gen_bool(82.0 / 183.0) { Sex::Male } else { Sex::Female };
    let edu = Normal::<f64>::new(6.6, 4.5).unwrap().sample(&mut rng).round().clamp(0.0, 20.0) as u32;
    let demographics = Demographics::new(age, sex, edu).expect("clamped ranges");

    let means: Vec<f64> = PRIORS
        .iter()
        .map(|p| {
            let (c, h) = ((p.mean.0 + p.mean.1) / 2.0, (p.mean.1 - p.mean.0) / 2.0 * cfg.baseline_spread);
            let m = uniform(&mut rng, (c - h, c + h));
            if p.non_negative {
                m.max(0.0)
            } else {
                m
            }
        })
        .collect();
    let sds: Vec<f64> = PRIORS.iter().map(|p| uniform(&mut rng, p.sd)).collect();
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);

    // patient-specific mix over the abnormal classes
    let abnormal_total: f64 = cfg.class_mix[1..].iter().sum();
    let gamma = cfg.class_mix_concentration.map(|k| Gamma::new(k, 1.0).unwrap());
    let mut class_weights = [0.0; 3];
    if abnormal_total > 0.0 {
        for (w, p) in class_weights.iter_mut().zip(&cfg.class_mix[1..]) {
            *w = p / abnormal_total * gamma.as_ref().map_or(1.0, |g| g.sample(&mut rng));
        }
    }
    let wsum: f64 = class_weights.iter().sum();

    let offset = chrono::FixedOffset::east_opt(cfg.utc_offset_seconds).unwrap();
    let day_start = |day: usize| -> DateTime<Utc> {
        let date = cfg.start_date + Duration::days(day as i64);
        let local = date.and_time(NaiveTime::from_hms_opt(cfg.wear_start_hour, 0, 0).unwrap());
        offset.from_local_datetime(&local).unwrap().with_timezone(&Utc)
    };

    let signatures = episode_signatures();
    let wear_minutes = cfg.wear_minutes();
    let slots = cfg.slots_per_day();
    let mut samples = Vec::new();
    let mut events = Vec::new();

    for day in wear_day_indices(cfg, &mut rng) {
        let start = day_start(day);

        // events and their leads first; drift is added to the signals below
        let n_events = if rate > 0.0 && wsum > 0.0 { Poisson::new(rate).unwrap().sample(&mut rng) as usize } else { 0 };
        let mut day_events: Vec<(i64, usize, i64)> = (0..n_events)
            .map(|_| {
                let minute = rng.gen_range(0..wear_minutes);
                let mut pick = rng.gen_range(0.0..wsum);
                let mut class = 2;
                for (c, w) in class_weights.iter().enumerate() {
                    if pick < *w {
                        class = c;
                        break;
                    }
                    pick -= w;
                }
                let (lo, hi) = cfg.prodromal_lead_minutes;
                let lead = rng.gen_range(lo..=hi) as i64;
                (minute, class, lead)
            })
            .collect();
        day_events.sort_unstable();
        for &(minute, class, _) in &day_events {
            events.push(BpsdEvent { timestamp: start + Duration::minutes(minute), class: BpsdClass::ABNORMAL[class] });
        }

        for slot in 0..slots {
            let slot_minute = SLOT_MINUTES * slot as i64;
            let slot_start = start + Duration::minutes(slot_minute);
            let hour = cfg.wear_start_hour as f64 + slot_minute as f64 / 60.0;
            let circadian = (std::f64::consts::TAU * hour / 24.0 + phase).sin();

            let mut drift = [0.0; N_SIGNALS];
            for &(minute, class, lead) in &day_events {
                let before = minute - slot_minute;
                if (0..=lead).contains(&before) {
                    let ramp = 1.0 - before as f64 / lead as f64;
                    for (d, dir) in drift.iter_mut().zip(&signatures[class].direction) {
                        *d += ramp * dir;
                    }
                }
            }

            for s in SignalType::ALL.iter().filter(|s| !s.is_sleep()) {
                let i = s.index();
                let repeats = if rng.gen_bool(0.05) { 2 } else { 1 };
                for _ in 0..repeats {
                    let mut v = means[i]
                        + 0.4 * sds[i] * circadian
                        + sds[i] * std_normal.sample(&mut rng)
                        + cfg.drift_scale * sds[i] * drift[i];
                    if PRIORS[i].non_negative {
                        v = v.max(0.0);
                    }
                    let jitter = rng.gen_range(0..(SLOT_MINUTES * 60));
                    samples.push(SignalSample {
                        timestamp: slot_start + Duration::seconds(jitter),
                        signal: *s,
                        value: v,
                    });
                }
            }

            if slot == 0 {
                for s in [SignalType::TossTurn, SignalType::SleepQuality] {
                    if rng.gen_bool(cfg.sleep_missing_prob) {
                        continue;
                    }
                    let i = s.index();
                    let v = (means[i] + sds[i] * std_normal.sample(&mut rng)).max(0.0);
                    samples.push(SignalSample {
                        timestamp: slot_start + Duration::seconds(rng.gen_range(0..(SLOT_MINUTES * 60))),
                        signal: s,
                        value: v,
                    });
                }
            }
        }
    }

    samples.sort_by_key(|s| (s.timestamp, s.signal));
    PatientRecord { patient_id: format!("P{:03}", index + 1), demographics, samples, events }
}

/// Deterministic in `config.seed`; patients are generated independently.
pub fn generate_cohort(config: &GeneratorConfig) -> Result<Cohort> {
    config.validate()?;
    let rate = solve_event_rate(config)?;
    let patients = crate::par::map_range(config.n_patients, |i| generate_patient(config, i, rate));
    Ok(Cohort { patients })
}
