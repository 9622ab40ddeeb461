use std::fs;

use bpsd::cohort::{align_cohort, load_cohort_dir, write_cohort, Cohort, DEMOGRAPHICS_FILE, EVENTS_FILE, SIGNALS_FILE};
use bpsd::featurize::build_instances;
use bpsd::synthgen::{generate_cohort, GeneratorConfig};
use bpsd::Error;

fn write_files(dir: &std::path::Path, signals: &str, events: &str, demographics: &str) {
    fs::write(dir.join(SIGNALS_FILE), signals).unwrap();
    fs::write(dir.join(EVENTS_FILE), events).unwrap();
    fs::write(dir.join(DEMOGRAPHICS_FILE), demographics).unwrap();
}

#[test]
fn empty_signals_with_one_patient() {
    let dir = tempfile::tempdir().unwrap();
    write_files(
        dir.path(),
        "patient_id,timestamp,signal,value\n",
        "patient_id,timestamp,bpsd_class\n",
        "patient_id,age,sex,education_years\nP1,80,F,6\n",
    );
    let cohort = load_cohort_dir(dir.path()).unwrap();
    assert_eq!(cohort.patients.len(), 1);
    assert!(cohort.patients[0].samples.is_empty());
}

#[test]
fn unknown_signal_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    write_files(
        dir.path(),
        "patient_id,timestamp,signal,value\nP1,2024-01-01T08:00:00+08:00,HR,70\nP1,2024-01-01T08:00:00+08:00,HeartRate,71\n",
        "patient_id,timestamp,bpsd_class\n",
        "patient_id,age,sex,education_years\nP1,80,F,6\n",
    );
    match load_cohort_dir(dir.path()) {
        Err(Error::MalformedRow { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains("HeartRate"), "{message}");
        }
        other => panic!("expected a row error, got {other:?}"),
    }
}

#[test]
fn empty_cohort_writes_header_only_files() {
    let dir = tempfile::tempdir().unwrap();
    write_cohort(&Cohort::default(), dir.path()).unwrap();
    for (file, header) in [
        (SIGNALS_FILE, "patient_id,timestamp,signal,value"),
        (EVENTS_FILE, "patient_id,timestamp,bpsd_class"),
        (DEMOGRAPHICS_FILE, "patient_id,age,sex,education_years"),
    ] {
        assert_eq!(fs::read_to_string(dir.path().join(file)).unwrap(), format!("{header}\n"));
    }
}

#[test]
fn one_patient_gives_two_demographics_lines() {
    let cohort = generate_cohort(&GeneratorConfig { n_patients: 1, days: 2, ..GeneratorConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_cohort(&cohort, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join(DEMOGRAPHICS_FILE)).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn seed_42_defaults_round_trip_and_are_byte_stable() {
    let cohort = generate_cohort(&GeneratorConfig::default()).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_cohort(&cohort, a.path()).unwrap();
    write_cohort(&generate_cohort(&GeneratorConfig::default()).unwrap(), b.path()).unwrap();
    assert_eq!(load_cohort_dir(a.path()).unwrap(), cohort);
    for file in [SIGNALS_FILE, EVENTS_FILE, DEMOGRAPHICS_FILE] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
}

#[test]
fn seed_42_normal_share_is_near_the_configured_mix() {
    let cohort = generate_cohort(&GeneratorConfig::default()).unwrap();
    let grids = align_cohort(&cohort);
    let (mut normal, mut total) = (0usize, 0usize);
    for (p, g) in cohort.patients.iter().zip(&grids) {
        for i in build_instances(g, &p.events, &p.demographics) {
            total += 1;
            normal += usize::from(!i.occurred);
        }
    }
    let share = normal as f64 / total as f64;
    assert!((0.80..=0.86).contains(&share), "Normal share {share:.4}");
}
