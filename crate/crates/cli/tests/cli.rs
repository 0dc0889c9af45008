use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fvc"))
        .args(["--single-thread"])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        Run {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn p(&self, rel: &str) -> String {
        self.dir.path().join(rel).to_string_lossy().into_owned()
    }

    fn gen(&self, speakers: &str) -> PathBuf {
        let o = fvc(&["gen-corpus", "--out-dir", &self.p("corpus"), "--speakers", speakers, "--recordings", "4", "--frames", "600", "--seed", "1"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        PathBuf::from(stdout(&o).trim().strip_prefix("wrote ").unwrap())
    }

    fn step(&self, cmd: &str, extra: &[&str]) -> Output {
        let config = self.p("corpus/config.toml");
        let (out, models) = (self.p("out"), self.p("models"));
        let mut args = vec![cmd, "--config", &config, "--out-dir", &out, "--models-dir", &models];
        args.extend_from_slice(extra);
        fvc(&args)
    }
}

fn manifest_arg(p: &Path) -> [&str; 2] {
    ["--manifest", p.to_str().unwrap()]
}

#[test]
fn full_flow_exits_zero_and_compare_is_repeatable() {
    let run = Run::new();
    let manifest = run.gen("4");
    assert!(manifest.exists());
    for cmd in ["extract", "train", "calibrate", "validate"] {
        let o = run.step(cmd, &manifest_arg(&manifest));
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(run.dir.path().join("out").join("report").exists());

    let body = fs::read_to_string(&manifest).unwrap();
    let rec = body.lines().nth(1).unwrap().split(',').next().unwrap();
    let rec = manifest.parent().unwrap().join(rec);
    let rec = rec.to_str().unwrap();
    let a = run.step("compare", &["--questioned", rec, "--known", rec]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let b = run.step("compare", &["--questioned", rec, "--known", rec]);
    assert!(!stdout(&a).is_empty());
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn compare_without_calibration_exits_two() {
    let run = Run::new();
    let manifest = run.gen("2");
    for cmd in ["extract", "train"] {
        assert_eq!(run.step(cmd, &manifest_arg(&manifest)).status.code(), Some(0));
    }
    let body = fs::read_to_string(&manifest).unwrap();
    let rec = manifest.parent().unwrap().join(body.lines().nth(1).unwrap().split(',').next().unwrap());
    let rec = rec.to_str().unwrap();
    let o = run.step("compare", &["--questioned", rec, "--known", rec]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("calibration"));
}

#[test]
fn unreadable_recording_exits_one() {
    let run = Run::new();
    let manifest = run.gen("2");
    let body = fs::read_to_string(&manifest).unwrap();
    let first = body.lines().nth(1).unwrap().split(',').next().unwrap();
    fs::write(manifest.parent().unwrap().join(first), b"not a feature file").unwrap();
    let o = run.step("extract", &manifest_arg(&manifest));
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("1 failed"));
}

#[test]
fn bad_config_exits_two() {
    let run = Run::new();
    let manifest = run.gen("2");
    fs::write(run.dir.path().join("corpus/config.toml"), "bogus = 1\n").unwrap();
    assert_eq!(run.step("extract", &manifest_arg(&manifest)).status.code(), Some(2));
    let missing = run.dir.path().join("nope.csv");
    let o = fvc(&["extract", "--manifest", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
