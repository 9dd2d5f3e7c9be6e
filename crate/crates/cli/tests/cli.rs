use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ecgnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecgnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn corpus(name: &str) -> String {
    format!("{}/../core/tests/data/{name}", env!("CARGO_MANIFEST_DIR"))
}

const MINI: &[&str] = &[
    "--set",
    "model.n_blocks=2",
    "--set",
    "model.input_samples=256",
    "--set",
    "model.base_filters=8",
    "--set",
    "model.filter_growth=8",
    "--set",
    "train.epochs=3",
    "--set",
    "train.batch_size=8",
    "--set",
    "train.validation_fraction=0.25",
];

#[test]
fn synth_is_deterministic_and_validates_n() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        let o = ecgnet(&["synth", "--n", "30", "--seed", "7", "--out", out], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(d.join("a/manifest.jsonl")).unwrap();
    assert_eq!(a, fs::read(d.join("b/manifest.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 30);
    assert!(d.join("a/config.json").exists());
    assert!(!d.join("a/.lock").exists());

    assert_eq!(code(&ecgnet(&["synth", "--n", "0", "--out", "c"], d)), 2);
    assert_eq!(
        code(&ecgnet(&["synth", "--n", "5", "--out", "c", "--set", "nope=1"], d)),
        2
    );
    assert_eq!(code(&ecgnet(&["frobnicate"], d)), 2);
}

#[test]
fn prevalence_override_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecgnet(
        &["synth", "--n", "5", "--prevalence", "ST=0.10", "--out", "p"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let info: Value = serde_json::from_slice(&fs::read(dir.path().join("p/dataset.json")).unwrap()).unwrap();
    assert_eq!(info["spec"]["prevalences"][5], 0.10);
    let frozen: Value = serde_json::from_slice(&fs::read(dir.path().join("p/config.json")).unwrap()).unwrap();
    assert_eq!(frozen["synth.prevalence.ST"], 0.10);
    assert_eq!(frozen["command"], "synth");
}

#[test]
fn adjudicate_reproduces_golden_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus("adjudication_corpus.jsonl");
    let o = ecgnet(&["adjudicate", "--input", &input, "--out", "adj"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let got: Vec<Value> = fs::read_to_string(dir.path().join("adj/decisions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let want: Vec<Value> = fs::read_to_string(corpus("adjudication_expected.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(got.len(), want.len());
    let mismatches = got.iter().zip(&want).filter(|(g, w)| g != w).count();
    assert_eq!(mismatches, 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("rule"));
    assert!(dir.path().join("adj/summary.json").exists());
}

#[test]
fn adjudicate_empty_and_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("empty.jsonl"), "").unwrap();
    let o = ecgnet(&["adjudicate", "--input", "empty.jsonl", "--out", "e"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(d.join("e/decisions.jsonl")).unwrap(), "");
    assert!(String::from_utf8_lossy(&o.stderr).contains("no exams"));

    let good = fs::read_to_string(corpus("adjudication_corpus.jsonl")).unwrap();
    let first = good.lines().next().unwrap();
    fs::write(
        d.join("mixed.jsonl"),
        format!("{first}\n{{\"id\": \"x\", \"expert\": [true]}}\n"),
    )
    .unwrap();
    let o = ecgnet(&["adjudicate", "--input", "mixed.jsonl", "--out", "m"], d);
    assert_eq!(code(&o), 0);
    let summary: Value = serde_json::from_slice(&fs::read(d.join("m/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["exams"], 1);
    assert_eq!(summary["malformed"], 1);

    fs::write(d.join("bad.jsonl"), "not json\n{}\n").unwrap();
    assert_eq!(
        code(&ecgnet(&["adjudicate", "--input", "bad.jsonl", "--out", "b"], d)),
        1
    );
}

#[test]
fn train_is_reproducible_and_eval_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut synth = vec!["synth", "--n", "24", "--seed", "2", "--out", "ds"];
    synth.extend(["--set", "synth.prevalence.ST=0.3", "--set", "synth.prevalence.RBBB=0.3"]);
    assert_eq!(code(&ecgnet(&synth, d)), 0);
    for out in ["r1", "r2"] {
        let mut args = vec!["train", "--dataset", "ds", "--out", out, "--seed", "4"];
        args.extend_from_slice(MINI);
        let o = ecgnet(&args, d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    // config.json differs only in its recorded output path
    for f in ["train.jsonl", "model.rnw", "last.rnw", "split.json"] {
        let same = fs::read(d.join("r1").join(f)).unwrap() == fs::read(d.join("r2").join(f)).unwrap();
        assert!(same, "{f} differs between identical runs");
    }
    let log = fs::read_to_string(d.join("r1/train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(!log.contains("wall_time"));
    assert_eq!(
        fs::read_to_string(d.join("r1/timing.jsonl")).unwrap().lines().count(),
        3
    );

    let o = ecgnet(
        &[
            "eval",
            "--dataset",
            "ds",
            "--weights",
            "r1/model.rnw",
            "--out",
            "ev",
            "--thresholds",
            "0.5,0.5,0.5,0.5,0.5,0.5",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&fs::read(d.join("ev/report.json")).unwrap()).unwrap();
    let classes: Vec<&str> = report["classes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["class"].as_str().unwrap())
        .collect();
    assert_eq!(classes, ["1dAVb", "RBBB", "LBBB", "SB", "AF", "ST"]);
    assert_eq!(report["n_exams"], 24);
    assert!(report["classes"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["threshold"] == 0.5));
    for c in classes {
        assert!(d.join(format!("ev/pr_{c}.csv")).exists());
    }

    let o = ecgnet(
        &["eval", "--dataset", "ds", "--weights", "r1/model.rnw", "--out", "ev2"],
        d,
    );
    assert_eq!(code(&o), 0);
    let th: Value = serde_json::from_slice(&fs::read(d.join("ev2/thresholds.json")).unwrap()).unwrap();
    assert_eq!(th["source"], "held-out");

    fs::write(d.join("junk.rnw"), b"RNW1 not really").unwrap();
    assert_eq!(
        code(&ecgnet(
            &["eval", "--dataset", "ds", "--weights", "junk.rnw", "--out", "ev3"],
            d
        )),
        1
    );
}

#[test]
fn locked_out_dir_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("busy")).unwrap();
    fs::write(dir.path().join("busy/.lock"), "1").unwrap();
    let o = ecgnet(&["synth", "--n", "2", "--out", "busy"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("in use"));
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecgnet(&["selfcheck"], dir.path());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(stdout.contains("all checks passed"));
    assert!(!stdout.contains("FAIL"));
}
