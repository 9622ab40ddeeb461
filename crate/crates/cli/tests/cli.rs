use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bpsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpsd")).args(args).output().expect("run bpsd")
}

fn ok(args: &[&str]) -> Output {
    let out = bpsd(args);
    assert!(out.status.success(), "bpsd {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FAST: &str = "[model]\ntune_generalized = false\ntune_baseline = false\n\n[tcn]\nepochs = 2\n";

fn manifest_without_timestamp(dir: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("created_at").expect("created_at present");
    v
}

#[test]
fn generate_train_evaluate_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let m1 = tmp.path().join("m1");
    let m2 = tmp.path().join("m2");
    let reports = tmp.path().join("r");
    let fast = tmp.path().join("fast.ini");
    fs::write(&fast, FAST).unwrap();

    ok(&["generate", "--seed", "42", "--patients", "4", "--days", "14", "--out", path(&data)]);
    for f in ["signals.csv", "events.csv", "demographics.csv", "instances.csv"] {
        assert!(data.join(f).is_file(), "{f}");
    }

    for m in [&m1, &m2] {
        ok(&["train", "--data", path(&data), "--config", path(&fast), "--out", path(m)]);
    }
    assert_eq!(manifest_without_timestamp(&m1), manifest_without_timestamp(&m2));

    ok(&["evaluate", "--model", path(&m1), "--out", path(&reports)]);
    let summary = fs::read_to_string(reports.join("summary.md")).unwrap();
    assert!(summary.contains("| "), "{summary}");
    for f in ["per_patient_metrics.csv", "aggregate.csv", "ablation.csv", "exclusions.log"] {
        assert!(reports.join(f).is_file(), "{f}");
    }

    let ablation = tmp.path().join("a");
    ok(&["ablate", "--model", path(&m1), "--out", path(&ablation)]);
    let table = fs::read_to_string(ablation.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 5, "{table}");

    // the Normal gate: below-threshold occurrence always yields Normal
    let manifest: Value = serde_json::from_str(&fs::read_to_string(m1.join("manifest.json")).unwrap()).unwrap();
    let modeled: Vec<String> = manifest["personalized"].as_object().unwrap().keys().cloned().collect();
    let instances = fs::read_to_string(data.join("instances.csv")).unwrap();
    let mut gated = 0;
    for (row, line) in instances.lines().skip(1).enumerate() {
        let pid = line.split(',').next().unwrap();
        if !modeled.iter().any(|m| m == pid) || !line.contains("Normal") {
            continue;
        }
        let out = ok(&[
            "predict",
            "--model",
            path(&m1),
            "--instances",
            path(&data.join("instances.csv")),
            "--row",
            &row.to_string(),
        ]);
        let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(doc["patient_id"], pid);
        assert_eq!(doc["ensemble_probs"].as_array().unwrap().len(), 3);
        assert!(doc["model_version"].as_str().unwrap().contains('+'));
        if doc["occurrence_prob"].as_f64().unwrap() < 0.5 {
            assert_eq!(doc["final_class"], "Normal");
            gated += 1;
            if gated == 3 {
                break;
            }
        }
    }
    assert!(gated > 0, "no below-threshold Normal instance found");
}

#[test]
fn bad_config_exits_2_and_leaves_no_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.ini");
    fs::write(&cfg, "[model]\nflavour = mint\n").unwrap();
    let out_dir = tmp.path().join("m");
    let out = bpsd(&["train", "--config", path(&cfg), "--out", path(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("flavour"));
    assert!(!out_dir.exists());
}

#[test]
fn missing_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bpsd(&["train", "--data", path(&tmp.path().join("nowhere")), "--out", path(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["code"], 3);
}

/// One patient, one wear day, every signal present, no events.
fn all_normal_cohort(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("demographics.csv"), "patient_id,age,sex,education_years\nP001,81,F,6\n").unwrap();
    fs::write(dir.join("events.csv"), "patient_id,timestamp,bpsd_class\n").unwrap();
    let mut signals = String::from("patient_id,timestamp,signal,value\n");
    signals.push_str("P001,2024-01-01T08:00:00+08:00,TossTurn,12\nP001,2024-01-01T08:00:00+08:00,SleepQuality,70\n");
    for slot in 0..36 {
        let (h, m) = (8 + slot / 4, (slot % 4) * 15);
        for (name, v) in [
            ("HR", 72),
            ("HRV", 40),
            ("SYS", 120),
            ("DIA", 80),
            ("Stress", 30),
            ("Temp", 36),
            ("Oxygen", 97),
            ("Steps", 10),
            ("Calories", 5),
        ] {
            signals.push_str(&format!("P001,2024-01-01T{h:02}:{m:02}:00+08:00,{name},{}\n", v + slot % 3));
        }
    }
    fs::write(dir.join("signals.csv"), signals).unwrap();
}

#[test]
fn no_abnormal_data_exits_4_and_cleans_up() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    all_normal_cohort(&data);
    let out_dir = tmp.path().join("m");
    let out = bpsd(&["train", "--data", path(&data), "--out", path(&out_dir)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_json(&out)["error"], "degenerate");
    assert!(!out_dir.exists());
    let leftovers: Vec<_> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains("partial"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn predict_without_bundle_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("instances.csv");
    fs::write(&empty, "").unwrap();
    let out = bpsd(&["predict", "--model", path(tmp.path()), "--instances", path(&empty)]);
    assert_eq!(out.status.code(), Some(3));
}
