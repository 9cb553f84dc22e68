//! End-to-end runs of the `chronokit` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use chronokit::interpret::PyramidReport;
use chronokit::netspec::SRTG_DEMO_SPEC;
use chronokit::rng;
use chronokit::tensor::io::write_stv1;

fn run(cwd: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_chronokit"))
        .args(args)
        .current_dir(cwd)
        .env("CHRONOKIT_THREADS", "1")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 output")
}

/// Every file below `dir` with its contents, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// Runs the file-producing subcommands in a fresh directory and returns the
/// directory contents plus everything printed to stdout.
fn pipeline() -> (BTreeMap<String, Vec<u8>>, String) {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    fs::write(cwd.join("net.txt"), SRTG_DEMO_SPEC).unwrap();
    let mut g = rng::stream(5, "cli");
    fs::create_dir(cwd.join("in")).unwrap();
    write_stv1(cwd.join("in/act.stv1"), &rng::uniform(&mut g, vec![2, 4, 4, 4, 4], 1.0)).unwrap();
    write_stv1(cwd.join("in/weights.stv1"), &rng::uniform(&mut g, vec![3, 4], 1.0)).unwrap();

    let rec = ["--spec", "net.txt", "--recording", "rec", "--seed", "3"];
    let runs: Vec<Vec<&str>> = vec![
        vec!["record", "--spec", "net.txt", "--seed", "3", "--out-dir", "rec"],
        [&["saliency"][..], &rec, &["--out-dir", "sal"]].concat(),
        [&["backstep"][..], &rec, &["--depth", "3", "--out-dir", "bs"]].concat(),
        [&["backstep"][..], &rec, &["--mode", "layer", "--out-dir", "bs-layer"]].concat(),
        vec!["pool", "--input", "rec/clip.stv1", "--keep", "0.5", "--out-dir", "pool"],
        vec!["srtg-demo", "--input", "rec/clip.stv1", "--out-dir", "srtg"],
        vec!["mtconv-demo", "--input", "rec/clip.stv1", "--delta", "1/2", "--out-dir", "mt"],
        vec!["classreg-demo", "--activation", "in/act.stv1", "--weights", "in/weights.stv1", "--out-dir", "cr"],
        vec!["schedule", "--base", "32x16x224x224", "--cycles", "both"],
        vec!["sample", "--clip-len", "64", "--frames", "8", "--count", "5", "--seed", "2"],
        vec!["mcnemar", "--a", "100", "--b", "12", "--c", "3", "--d", "85"],
        vec!["flops", "--spec", "net.txt"],
        vec!["train-demo", "--epochs", "2", "--clips", "8", "--extents", "4x8x8", "--out-dir", "train"],
    ];
    let printed = runs.iter().map(|args| stdout(&run(cwd, args))).collect::<Vec<_>>().join("\n");
    (snapshot(cwd), printed)
}

#[test]
fn repeated_runs_are_byte_identical_and_stay_in_their_directories() {
    let (first, printed_first) = pipeline();
    let (second, printed_second) = pipeline();
    assert_eq!(printed_first, printed_second);
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (name, bytes) in &first {
        assert!(second[name] == *bytes, "{name} differs between runs");
    }
    let allowed = ["net.txt", "in", "rec", "sal", "bs", "bs-layer", "pool", "srtg", "mt", "cr", "train"];
    for name in first.keys() {
        let top = name.split(['/', '\\']).next().unwrap();
        assert!(allowed.contains(&top), "unexpected file {name}");
    }
    for expected in ["rec/clip.stv1", "bs/report.csv", "pool/pooled.stv1", "pool/selection.csv", "cr/classes.csv", "train/curve.csv"] {
        assert!(first.contains_key(expected), "missing {expected}");
    }
    assert!(first.keys().any(|k| k.starts_with("sal") && k.ends_with(".pgm")));
}

#[test]
fn edge_report_parses_back_identically() {
    let (files, _) = pipeline();
    let text = String::from_utf8(files["bs/report.csv"].clone()).unwrap();
    let report = PyramidReport::parse(&text).unwrap();
    assert_eq!(report.to_csv(), text);
}

#[test]
fn long_cycle_schedule_ends_at_the_base_shape() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&run(dir.path(), &["schedule", "--base", "32x16x224x224", "--cycles", "long"]));
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 4, "{text}");
    let last: Vec<&str> = rows[3].split(',').collect();
    assert!(rows[3].contains("32") && last.contains(&"16") && last.contains(&"224"), "{text}");
}

#[test]
fn mcnemar_reports_a_known_table() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&run(dir.path(), &["mcnemar", "--a", "100", "--b", "25", "--c", "10", "--d", "65"]));
    // (|25 - 10| - 1)^2 / 35 = 5.6
    assert!(text.contains("5.6"), "{text}");
}

#[test]
fn every_gradient_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&run(dir.path(), &["gradcheck", "--all", "--cases", "5", "--seed", "1"]));
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 5, "{text}");
    assert!(rows.iter().all(|r| r.ends_with(",true")), "{text}");
}

#[test]
fn bad_arguments_exit_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_chronokit"))
        .args(["schedule", "--base", "not-a-shape"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}
