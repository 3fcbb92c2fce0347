use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rfp_core::experiment::{ExperimentName, ExperimentSpec};
use rfp_core::mcaff::ModelKind;
use rfp_core::train::TrainConfig;

fn rfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfp")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rfp(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs: 2,
        ..TrainConfig::default()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.wfdi");
    let ckpt = dir.path().join("m.mcaf");
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, serde_json::to_string(&quick_train()).unwrap()).unwrap();

    ok(&["gen-data", "--devices", "3", "--days", "2", "--frames", "8", "--seed", "4", "--out", s(&data)]);
    let again = dir.path().join("again.wfdi");
    ok(&["gen-data", "--devices", "3", "--days", "2", "--frames", "8", "--seed", "4", "--out", s(&again)]);
    assert_eq!(fs::read(&data).unwrap(), fs::read(&again).unwrap());

    let trained = ok(&[
        "train", "--data", s(&data), "--model", "mfft", "--fraction", "0.5", "--seed", "4", "--config", s(&cfg),
        "--out", s(&ckpt),
    ]);
    assert!(trained.starts_with("mfft: best epoch"), "{trained}");
    assert!(ckpt.exists());
    assert!(ckpt.with_extension("history.csv").exists());

    let eval = ok(&["eval", "--data", s(&data), "--model", s(&ckpt)]);
    let mut lines = eval.lines();
    let head = lines.next().unwrap();
    assert!(head.starts_with("accuracy "), "{head}");
    let frames: usize = head.split_whitespace().nth(3).unwrap().parse().unwrap();
    let rows: Vec<usize> = lines
        .map(|l| l.split(',').map(|c| c.parse::<usize>().unwrap()).sum())
        .collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().sum::<usize>(), frames);
}

#[test]
fn experiment_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.wfdi");
    let out = dir.path().join("results");
    ok(&["gen-data", "--devices", "2", "--days", "2", "--frames", "8", "--seed", "9", "--out", s(&data)]);
    let spec = ExperimentSpec {
        models: vec![ModelKind::Mcaff],
        sweep: vec![0.5],
        train: quick_train(),
        ..ExperimentSpec::new(ExperimentName::AblationFraction, &data, &out, 9)
    };
    let cfg = dir.path().join("spec.json");
    fs::write(&cfg, serde_json::to_string(&spec).unwrap()).unwrap();

    let table = ok(&["experiment", "ablation_fraction", "--config", s(&cfg)]);
    assert!(table.starts_with("mcaff,50%,"), "{table}");
    let csv = out.join("ablation_fraction.csv");
    assert!(csv.exists());
    let svg = out.join("ablation_fraction.svg");
    fs::remove_file(&svg).unwrap();
    ok(&["report", "--out", s(&out)]);
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.wfdi");
    let out = rfp(&["eval", "--data", s(&missing), "--model", s(&missing)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval: loading dataset"));

    let junk = dir.path().join("junk.wfdi");
    fs::write(&junk, b"not a dataset").unwrap();
    let out = rfp(&["train", "--data", s(&junk), "--out", s(&dir.path().join("m.mcaf"))]);
    assert!(!out.status.success());

    assert!(!rfp(&["experiment", "no_such_suite", "--data", "x", "--out", "y"]).status.success());
    assert!(!rfp(&["report", "--out", s(dir.path())]).status.success());
}
