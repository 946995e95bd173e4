use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cdrift(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdrift"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn cdrift")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("bad json ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

/// Generated benchmark plus a calibrated store in a fresh directory.
fn workspace() -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().to_path_buf();
    assert_eq!(code(&cdrift(&dir, &["generate", "data", "--seed", "1"])), 0);
    let out = cdrift(
        &dir,
        &[
            "calibrate",
            "data/calibration.jsonl",
            "--store",
            "store.json",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (tmp, dir)
}

#[test]
fn calibrate_reports_and_is_deterministic() {
    let (_tmp, dir) = workspace();
    let first = fs::read(dir.join("store.json")).unwrap();
    let out = cdrift(
        &dir,
        &[
            "calibrate",
            "data/calibration.jsonl",
            "--store",
            "again.json",
        ],
    );
    assert_eq!(code(&out), 0);
    let summary = json(&out);
    assert_eq!(summary["task"], "classification");
    assert_eq!(summary["samples"], 150);
    assert_eq!(summary["functions"].as_array().unwrap().len(), 4);
    assert_eq!(first, fs::read(dir.join("again.json")).unwrap());
}

#[test]
fn calibrate_rejects_schema_violations() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("bad.jsonl"),
        "{\"id\":\"a\",\"features\":[1.0],\"label\":0,\"proba\":[1.0]}\n{\"id\":\"b\",\"features\":[1.0],\"label\":0,\"target\":1.0,\"proba\":[1.0]}\n",
    )
    .unwrap();
    let out = cdrift(dir, &["calibrate", "bad.jsonl", "--store", "s.json"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert!(!dir.join("s.json").exists());

    let out = cdrift(dir, &["calibrate", "missing.jsonl", "--store", "s.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn calibrate_joins_outputs_by_id() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let mut samples = String::new();
    let mut outputs = String::new();
    for i in 0..12 {
        let label = i % 2;
        samples.push_str(&format!(
            "{{\"id\":\"s{i}\",\"features\":[{}, {}],\"label\":{label}}}\n",
            i as f64,
            (i % 3) as f64
        ));
        let p = if label == 0 { 0.8 } else { 0.3 };
        // reversed order: the join must not depend on line order
        outputs = format!(
            "{{\"id\":\"s{i}\",\"features\":[0],\"proba\":[{p}, {}]}}\n",
            1.0 - p
        ) + &outputs;
    }
    fs::write(dir.join("cal.jsonl"), samples).unwrap();
    fs::write(dir.join("out.jsonl"), &outputs).unwrap();
    let out = cdrift(
        dir,
        &[
            "calibrate",
            "cal.jsonl",
            "--outputs",
            "out.jsonl",
            "--store",
            "s.json",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["samples"], 12);

    fs::write(
        dir.join("short.jsonl"),
        outputs.lines().skip(1).collect::<Vec<_>>().join("\n"),
    )
    .unwrap();
    let out = cdrift(
        dir,
        &[
            "calibrate",
            "cal.jsonl",
            "--outputs",
            "short.jsonl",
            "--store",
            "s.json",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn check_exit_codes() {
    let (_tmp, dir) = workspace();
    let out = cdrift(&dir, &["check", "--store", "store.json"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let report = json(&out);
    assert_eq!(report["coverages"].as_array().unwrap().len(), 3);
    assert_eq!(report["alert"], false);

    // Labels rotated after scoring: frozen scores no longer match the labels.
    let mut store: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("store.json")).unwrap()).unwrap();
    let k = store["num_labels"].as_u64().unwrap();
    for l in store["labels"].as_array_mut().unwrap() {
        *l = ((l.as_u64().unwrap() + 1) % k).into();
    }
    fs::write(
        dir.join("permuted.json"),
        serde_json::to_vec(&store).unwrap(),
    )
    .unwrap();
    let out = cdrift(&dir, &["check", "--store", "permuted.json"]);
    assert_eq!(code(&out), 3);
    assert_eq!(json(&out)["alert"], true);

    fs::write(dir.join("corrupt.json"), "{\"schema_version\": 1").unwrap();
    assert_eq!(
        code(&cdrift(&dir, &["check", "--store", "corrupt.json"])),
        2
    );
    store["schema_version"] = 99.into();
    fs::write(dir.join("future.json"), serde_json::to_vec(&store).unwrap()).unwrap();
    assert_eq!(code(&cdrift(&dir, &["check", "--store", "future.json"])), 2);
    assert_eq!(code(&cdrift(&dir, &["check"])), 2);
}

#[test]
fn detect_preserves_order_and_cardinality() {
    let (_tmp, dir) = workspace();
    let out = cdrift(
        &dir,
        &["detect", "data/test.jsonl", "--store", "store.json"],
    );
    assert_eq!(code(&out), 0);
    let inputs = fs::read_to_string(dir.join("data/test.jsonl")).unwrap();
    let text = stdout(&out);
    assert_eq!(text.lines().count(), inputs.lines().count());
    for (a, i) in text.lines().zip(inputs.lines()) {
        let a: serde_json::Value = serde_json::from_str(a).unwrap();
        let i: serde_json::Value = serde_json::from_str(i).unwrap();
        assert_eq!(a["id"], i["id"]);
        assert_eq!(a["verdicts"].as_array().unwrap().len(), 4);
    }

    fs::write(dir.join("empty.jsonl"), "").unwrap();
    let out = cdrift(&dir, &["detect", "empty.jsonl", "--store", "store.json"]);
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());

    fs::write(
        dir.join("wrong.jsonl"),
        "{\"id\":\"x\",\"features\":[1,2,3,4],\"pred\":1.0}\n",
    )
    .unwrap();
    assert_eq!(
        code(&cdrift(
            &dir,
            &["detect", "wrong.jsonl", "--store", "store.json"]
        )),
        2
    );
    fs::write(
        dir.join("dim.jsonl"),
        "{\"id\":\"x\",\"features\":[1],\"proba\":[0.5,0.5]}\n",
    )
    .unwrap();
    assert_eq!(
        code(&cdrift(
            &dir,
            &["detect", "dim.jsonl", "--store", "store.json"]
        )),
        2
    );
}

#[test]
fn detect_accepts_a_calibration_duplicate() {
    // Ten-sample fixed store: two tight clusters with confident, correct outputs.
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let mut cal = String::new();
    for i in 0..10 {
        let label = i / 5;
        let x = label as f64 * 10.0 + (i % 5) as f64 * 0.1;
        let p = 0.9 - (i % 5) as f64 * 0.05;
        let proba = if label == 0 {
            [p, 1.0 - p]
        } else {
            [1.0 - p, p]
        };
        cal.push_str(&format!(
            "{{\"id\":\"c{i}\",\"features\":[{x}, 0.0],\"label\":{label},\"proba\":[{}, {}]}}\n",
            proba[0], proba[1]
        ));
    }
    fs::write(dir.join("cal.jsonl"), &cal).unwrap();
    assert_eq!(
        code(&cdrift(
            dir,
            &["calibrate", "cal.jsonl", "--store", "s.json"]
        )),
        0
    );
    fs::write(dir.join("t.jsonl"), cal.lines().next().unwrap()).unwrap();
    let out = cdrift(dir, &["detect", "t.jsonl", "--store", "s.json"]);
    assert_eq!(code(&out), 0);
    let a: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(a["drifting"], false);
}

fn write_fixture(dir: &Path, rows: &[(bool, bool)]) {
    // (mispredicted, flagged)
    let mut truth = String::new();
    let mut assessments = String::new();
    for (i, &(wrong, flagged)) in rows.iter().enumerate() {
        let label = if wrong { 1 } else { 0 };
        truth.push_str(&format!(
            "{{\"id\":\"t{i}\",\"features\":[0],\"label\":{label},\"proba\":[0.9,0.1]}}\n"
        ));
        assessments.push_str(&format!(
            "{{\"id\":\"t{i}\",\"drifting\":{flagged},\"verdicts\":[{{\"function\":\"lac\",\"credibility\":{},\"confidence\":0.5,\"set_size\":3,\"accept\":{}}}]}}\n",
            if flagged { 0.1 } else { 0.95 },
            !flagged
        ));
    }
    fs::write(dir.join("truth.jsonl"), truth).unwrap();
    fs::write(dir.join("a.jsonl"), assessments).unwrap();
}

#[test]
fn evaluate_confusion_fixture() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let mut rows = vec![(true, true); 8];
    rows.extend(vec![(true, false); 2]);
    rows.extend(vec![(false, true); 5]);
    rows.extend(vec![(false, false); 85]);
    write_fixture(dir, &rows);
    let out = cdrift(dir, &["evaluate", "a.jsonl", "truth.jsonl"]);
    assert_eq!(code(&out), 0);
    let m = json(&out);
    assert_eq!(m["true_positives"], 8);
    assert_eq!(m["false_positives"], 5);
    assert!((m["recall"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    assert!((m["precision"].as_f64().unwrap() - 0.6154).abs() < 1e-4);

    let out = cdrift(dir, &["triage", "a.jsonl", "--budget", "0.2"]);
    assert_eq!(code(&out), 0);
    let ids: Vec<String> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(ids.len(), 3);
    assert_eq!(ids, vec!["t0", "t1", "t10"]);
    assert_eq!(
        code(&cdrift(dir, &["triage", "a.jsonl", "--budget", "0"])),
        2
    );
}

#[test]
fn evaluate_perfect_and_error_cases() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_fixture(dir, &[(true, true), (false, false), (false, false)]);
    let m = json(&cdrift(dir, &["evaluate", "a.jsonl", "truth.jsonl"]));
    for key in ["accuracy", "precision", "recall", "f1"] {
        assert_eq!(m[key], 1.0, "{key}");
    }

    let truth = fs::read_to_string(dir.join("truth.jsonl")).unwrap();
    fs::write(dir.join("renamed.jsonl"), truth.replace("\"t2\"", "\"zz\"")).unwrap();
    assert_eq!(
        code(&cdrift(dir, &["evaluate", "a.jsonl", "renamed.jsonl"])),
        2
    );

    fs::write(dir.join("empty.jsonl"), "").unwrap();
    assert_eq!(
        code(&cdrift(dir, &["evaluate", "empty.jsonl", "empty.jsonl"])),
        2
    );
}

#[test]
fn config_file_and_overrides() {
    let (_tmp, dir) = workspace();
    fs::write(dir.join("bad.toml"), "epsilon = 0.1\nunknown_key = 3\n").unwrap();
    let out = cdrift(
        &dir,
        &[
            "calibrate",
            "data/calibration.jsonl",
            "--store",
            "s.json",
            "--config",
            "bad.toml",
        ],
    );
    assert_eq!(code(&out), 2);
    let out = cdrift(
        &dir,
        &[
            "calibrate",
            "data/calibration.jsonl",
            "--store",
            "s.json",
            "--epsilon",
            "1.5",
        ],
    );
    assert_eq!(code(&out), 2);

    fs::write(dir.join("lac.toml"), "functions = [\"lac\"]\n").unwrap();
    let out = cdrift(
        &dir,
        &[
            "detect",
            "data/test.jsonl",
            "--store",
            "store.json",
            "--config",
            "lac.toml",
        ],
    );
    assert_eq!(code(&out), 0);
    let first: serde_json::Value =
        serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap();
    assert_eq!(first["verdicts"].as_array().unwrap().len(), 1);
}

#[test]
fn grid_search_singleton_returns_that_config() {
    let (_tmp, dir) = workspace();
    let out = cdrift(
        &dir,
        &[
            "grid-search",
            "data/calibration.jsonl",
            "--epsilons",
            "0.2",
            "--output",
            "best.toml",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.join("best.toml")).unwrap();
    assert!(text.contains("epsilon = 0.2"), "{text}");
    assert_eq!(
        code(&cdrift(&dir, &["grid-search", "data/calibration.jsonl"])),
        2
    );
}

#[test]
fn demo_is_deterministic_and_improves_after_update() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let a = cdrift(dir, &["demo"]);
    let b = cdrift(dir, &["demo"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let report = json(&a);
    let before = report["drifted_accuracy_before"].as_f64().unwrap();
    let after = report["drifted_accuracy_after"].as_f64().unwrap();
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn demo_without_shift_flags_few_samples() {
    let tmp = TempDir::new().unwrap();
    let out = cdrift(tmp.path(), &["demo", "--drift-shift", "0"]);
    assert_eq!(code(&out), 0);
    let report = json(&out);
    let flagged = report["drifted"]["flagged"].as_f64().unwrap();
    let n = report["drifted"]["samples"].as_f64().unwrap();
    assert!(flagged / n <= 0.1 + 0.05, "{flagged} of {n}");
}

#[test]
fn usage_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&cdrift(tmp.path(), &["frobnicate"])), 2);
    assert_eq!(
        code(&cdrift(tmp.path(), &["demo", "--drift-shift", "abc"])),
        2
    );
}
