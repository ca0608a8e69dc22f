use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn appmul(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_appmul"))
        .args(args)
        .env_remove("APPMUL_DATA")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = appmul(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    appmul(args).status.code().unwrap()
}

/// Small config pointing at the bundled model and data.
fn config(dir: &Path, extra: &str) -> String {
    let lib = dir.join("lib.txt");
    if !lib.exists() {
        ok(&["gen-lib", "4", "--count", "4", "--seed", "0", "-o", lib.to_str().unwrap()]);
    }
    let text = format!(
        "seed = 1\nmodel = {:?}\nlibrary = {:?}\ndataset = {:?}\noutput = {:?}\n\
         estimation_batch = 64\ncalibration_samples = 128\neval_samples = 200\n{extra}\n[calib]\nepochs = 1\n",
        root().join("models/lenet-small.amq"),
        lib,
        root().join("data/mnist"),
        dir.join("out"),
    );
    let path = dir.join(format!("cfg{}.toml", extra.len()));
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_lib_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for p in [&a, &b] {
        ok(&["gen-lib", "2", "4", "--count", "3", "--seed", "9", "-o", p.to_str().unwrap()]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(fs::read_to_string(&a).unwrap().contains("exact_4x4"));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    // neither --config nor --seed
    assert_eq!(code(&["evaluate"]), 2);
    // config without a model path
    let bare = dir.path().join("bare.toml");
    fs::write(&bare, "seed = 1\n").unwrap();
    assert_eq!(code(&["run", "--config", bare.to_str().unwrap()]), 2);
    // unknown config key
    fs::write(&bare, "seed = 1\nratoi = 0.5\n").unwrap();
    assert_eq!(code(&["run", "--config", bare.to_str().unwrap()]), 2);
    // missing model file is a runtime failure
    assert_eq!(code(&["evaluate", "--seed", "0", "--model", "/nonexistent.amq"]), 1);
    // budget below the cheapest assignment
    let cfg = config(dir.path(), "ratio = 0.5");
    let out = appmul(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("minimum"));
}

#[test]
fn staged_commands_match_and_leave_inputs_alone() {
    let dir = TempDir::new().unwrap();
    let d = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let cfg = config(dir.path(), "ratio = 0.9");
    let model = root().join("models/lenet-small.amq");
    let before = fs::read(&model).unwrap();
    let lib_before = fs::read(d("lib.txt")).unwrap();

    ok(&["prepare", "--config", &cfg, "-o", &d("p1.amq")]);
    ok(&["prepare", "--config", &cfg, "-o", &d("p2.amq")]);
    assert_eq!(fs::read(d("p1.amq")).unwrap(), fs::read(d("p2.amq")).unwrap());

    let p = d("p1.amq");
    ok(&["estimate", "--config", &cfg, "--model", &p, "-o", &d("table.tsv")]);
    let sel = ok(&["select", "--config", &cfg, "--model", &p, "--table", &d("table.tsv"), "-o", &d("sel.txt")]);
    assert!(sel.contains("prune_4x4") || sel.contains("4x4"));
    ok(&["calibrate", "--config", &cfg, "--model", &p, "--selection", &d("sel.txt"), "-o", &d("cal.amq")]);
    let staged = ok(&["evaluate", "--config", &cfg, "--model", &d("cal.amq"), "--selection", &d("sel.txt")]);

    // the one-shot run reaches the same selection and accuracy
    ok(&["run", "--config", &cfg, "--model", &p]);
    let report = fs::read_to_string(dir.path().join("out/report.json")).unwrap();
    let post = staged.split_whitespace().nth(1).unwrap().trim_end_matches('%').parse::<f64>().unwrap();
    let line = report.lines().find(|l| l.contains("approx_post_calibration")).unwrap();
    let reported: f64 = line.split(':').nth(1).unwrap().trim().trim_end_matches(',').parse().unwrap();
    assert!((reported - post).abs() < 0.005, "{staged} vs {line}");
    assert_eq!(fs::read_to_string(d("sel.txt")).unwrap(), fs::read_to_string(dir.path().join("out/selection.txt")).unwrap());

    assert_eq!(fs::read(&model).unwrap(), before);
    assert_eq!(fs::read(d("lib.txt")).unwrap(), lib_before);
}

#[test]
fn run_is_repeatable_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "ratio = 0.85");
    let out = dir.path().join("out");
    let mut reports = Vec::new();
    for threads in ["1", "3", "3"] {
        ok(&["--threads", threads, "run", "--config", &cfg]);
        reports.push(fs::read(out.join("report.json")).unwrap());
        for f in ["summary.txt", "table.tsv", "selection.txt", "calibrated.amq", "distributions/layer0.csv"] {
            assert!(out.join(f).exists(), "{f}");
        }
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[1], reports[2]);
}
