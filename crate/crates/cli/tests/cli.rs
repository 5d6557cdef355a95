use std::path::Path;
use std::process::{Command, Output};

use synthid_core::embedding::VectorStore;

fn synthid(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthid"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SYNTHID_OUTPUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run synthid")
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let base = synthid(&["print-config"], dir.path());
    assert!(base.status.success());
    let mut text = String::from_utf8(base.stdout).unwrap();
    text = text.replacen("seed = ", "sede = 1\nseed = ", 1);
    std::fs::write(dir.path().join("bad.toml"), text).unwrap();
    let out = synthid(&["--config", "bad.toml", "sample-ids"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sede"), "{err}");
    assert!(err.starts_with("error[config]"), "{err}");
}

#[test]
fn printed_config_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let base = synthid(&["print-config"], dir.path());
    std::fs::write(dir.path().join("toy.toml"), &base.stdout).unwrap();
    let again = synthid(&["--config", "toy.toml", "print-config"], dir.path());
    assert!(again.status.success());
    assert_eq!(again.stdout, base.stdout);
}

#[test]
fn stage_without_inputs_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = synthid(&["--root", "run", "metrics"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing input"));
}

#[test]
fn standalone_verify_reads_score_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut tsv = String::from("score\tgenuine\n");
    for i in 0..20 {
        tsv.push_str(&format!("{}\t1\n{}\t0\n", 0.6 + 0.01 * i as f64, 0.1 + 0.01 * i as f64));
    }
    std::fs::write(dir.path().join("scores.tsv"), tsv).unwrap();
    let out = synthid(&["verify", "--scores", "scores.tsv", "--folds", "5", "--fpr", "0.1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pairs"], 40);
    assert_eq!(v["kfold"]["mean_accuracy"], 1.0);
    assert_eq!(v["tpr"]["tpr"], 1.0);
}

#[test]
fn malformed_score_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.tsv"), "score\tgenuine\n0.5\tmaybe\n").unwrap();
    let out = synthid(&["verify", "--scores", "s.tsv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn standalone_sampling_and_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    let ids = synthid(&["sample-ids", "--dim", "32", "--count", "20", "--seed", "4", "--out", "ids.vec2"], dir.path());
    assert!(ids.status.success(), "{}", String::from_utf8_lossy(&ids.stderr));
    let again = synthid(&["sample-ids", "--dim", "32", "--count", "20", "--seed", "4", "--out", "ids2.vec2"], dir.path());
    assert!(again.status.success());
    let a = std::fs::read(dir.path().join("ids.vec2")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("ids2.vec2")).unwrap());

    let p = synthid(&["perturb", "--ids", "ids.vec2", "--k", "5", "--out", "p.vec2"], dir.path());
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    let store = VectorStore::read(&dir.path().join("p.vec2")).unwrap();
    assert_eq!(store.len(), 100);
    assert_eq!(store.labels().unwrap()[99], "19");
}

#[test]
fn missing_standalone_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = synthid(&["sample-ids", "--out", "x.vec2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
