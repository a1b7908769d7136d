use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn fairmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairmatch"))
        .arg("--data-dir")
        .arg(data_dir())
        .args(args)
        .output()
        .expect("binary runs")
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(fairmatch(&["--help"]).status.code(), Some(0));
    assert_eq!(fairmatch(&["experiment"]).status.code(), Some(1));
    assert_eq!(fairmatch(&["no-such-command"]).status.code(), Some(1));
    let out = fairmatch(&["experiment", "--dataset", "german:nope", "--repeats", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let out = fairmatch(&["experiment", "--dataset", "german:sex", "--grid-step", "0.03"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn experiment_outputs_are_reproducible() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let out = fairmatch(&[
            "experiment",
            "--dataset",
            "german:sex",
            "--repeats",
            "2",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
    assert!(a.iter().any(|(n, _)| n == "results.json"));
    assert!(a.iter().any(|(n, _)| n == "german_sex_records.csv"));
    assert_eq!(a, b);

    let results = dirs[0].path().join("results.json");
    let rank_out = tempfile::tempdir().unwrap();
    let out = fairmatch(&[
        "rank",
        "--results",
        results.to_str().unwrap(),
        "--metric",
        "spd",
        "--out",
        rank_out.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let table = std::fs::read_to_string(rank_out.path().join("german_sex_rank_spd.csv")).unwrap();
    assert!(table.starts_with("treatment,median,rank\n"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn audit_and_mitigate_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = fairmatch(&["audit", "--dataset", "heart:age", "--repeats", "3", "--out", out_dir]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let subgroup = std::fs::read_to_string(dir.path().join("heart_age_subgroup.csv")).unwrap();
    assert!(subgroup.lines().any(|l| l.starts_with("psm_matched,")));
    assert!(dir.path().join("heart_age_curve_spd.svg").exists());

    let out = fairmatch(&["mitigate", "--dataset", "heart:age", "--out", out_dir]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cert: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("heart_age_certificate.json")).unwrap()).unwrap();
    assert!(cert["thresholds"]["theta_priv"].is_number());
    assert!(cert["matching"]["pairs"].is_array());
}

#[test]
fn missing_data_gives_partial_exit() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("schemas")).unwrap();
    std::fs::copy(data_dir().join("schemas/heart.json"), dir.path().join("schemas/heart.json")).unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_fairmatch"))
            .arg("--data-dir")
            .arg(dir.path())
            .args(args)
            .output()
            .unwrap()
    };
    let out = run(&["fetch"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("missing"));
    let out_dir = dir.path().join("out");
    let out = run(&["experiment", "--dataset", "heart:age", "--repeats", "1", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fairmatch(&["fetch", "--dataset", "german"]).status.code(), Some(0));
}
