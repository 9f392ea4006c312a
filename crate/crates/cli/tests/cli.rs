//! End-to-end checks through the compiled binary: exit codes, emitted file
//! sets, and byte-identical reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
n_patients = 2
days = 3
context_len = 12
bootstrap_reps = 50
permutation_reps = 2
probe_days = 1
probe_n_anchors = 2
window_stride = 6
";

fn write_tiny(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn run(dir: &Path, envs: &[(&str, &str)], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_driverlens"));
    cmd.current_dir(dir).args(args);
    for (key, value) in envs {
        cmd.env(key, value);
    }
    cmd.output().unwrap()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Sorted (relative path, bytes) listing of a full output tree.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn visit(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> =
            std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                visit(base, &path, out);
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    visit(dir, dir, &mut out);
    out
}

fn manifest_data_hash(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["data_hash"].as_str().unwrap().to_string()
}

#[test]
fn simulate_writes_dataset_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny(dir.path());
    assert_code(&run(dir.path(), &[], &["--config", "tiny.cfg", "--out", "a", "simulate"]), 0);

    let episodes: Vec<_> = tree(&dir.path().join("a/episodes"));
    assert_eq!(episodes.len(), 2 * 3 * 3, "cgm + events + latent per patient-day");
    assert!(dir.path().join("a/manifest.json").exists());

    assert_code(&run(dir.path(), &[], &["--config", "tiny.cfg", "--out", "b", "simulate"]), 0);
    assert_eq!(tree(&dir.path().join("a")), tree(&dir.path().join("b")));

    assert_code(
        &run(dir.path(), &[], &["--config", "tiny.cfg", "--out", "c", "--seed", "7", "simulate"]),
        0,
    );
    assert_ne!(manifest_data_hash(&dir.path().join("a")), manifest_data_hash(&dir.path().join("c")));
}

#[test]
fn worker_count_does_not_change_the_tree() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny(dir.path());
    for (out, workers) in [("w1", "1"), ("w4", "4")] {
        let base = &["--config", "tiny.cfg", "--out", out, "--workers", workers];
        for sub in ["simulate", "bench"] {
            let args: Vec<&str> = base.iter().copied().chain([sub]).collect();
            assert_code(&run(dir.path(), &[], &args), 0);
        }
    }
    assert_eq!(tree(&dir.path().join("w1")), tree(&dir.path().join("w4")));
}

#[test]
fn bench_then_report_renders_plots() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny(dir.path());
    let base = &["--config", "tiny.cfg", "--out", "run"];
    for sub in ["bench", "report"] {
        let args: Vec<&str> = base.iter().copied().chain([sub]).collect();
        assert_code(&run(dir.path(), &[], &args), 0);
    }
    for name in ["delta_vs_horizon.svg", "delta_vs_noise.svg", "attribution_shares.svg"] {
        let path = dir.path().join("run/plots").join(name);
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<?xml"), "{name} is not SVG");
    }
    for name in [
        "reports/delta_report.json",
        "reports/delta_report.csv",
        "reports/attribution.json",
        "reports/split_report.json",
        "models/uni.json",
        "models/multi.json",
    ] {
        assert!(dir.path().join("run").join(name).exists(), "{name} missing");
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    let out = run(dir.path(), &[], &["--config", "bad.cfg", "simulate"]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));

    write_tiny(dir.path());
    let out = run(dir.path(), &[], &["--config", "tiny.cfg", "--out", "empty", "report"]);
    assert_code(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing report"));

    assert_code(&run(dir.path(), &[], &["--config", "tiny.cfg", "--out", "run", "bench"]), 0);
    let report_path = dir.path().join("run/reports/delta_report.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    v["report"]["rows"].as_array_mut().unwrap().pop();
    std::fs::write(&report_path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    let out = run(dir.path(), &[], &["--config", "tiny.cfg", "--out", "run", "report"]);
    assert_code(&out, 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("report incomplete"));
}

#[test]
fn env_overrides_apply_and_flags_beat_them() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny(dir.path());
    assert_code(&run(dir.path(), &[], &["--config", "tiny.cfg", "--out", "a", "simulate"]), 0);
    let baseline = manifest_data_hash(&dir.path().join("a"));

    let env = [("DRIVERLENS_MASTER_SEED", "7")];
    assert_code(&run(dir.path(), &env, &["--config", "tiny.cfg", "--out", "b", "simulate"]), 0);
    assert_ne!(manifest_data_hash(&dir.path().join("b")), baseline);

    assert_code(
        &run(dir.path(), &env, &["--config", "tiny.cfg", "--out", "c", "--seed", "42", "simulate"]),
        0,
    );
    assert_eq!(manifest_data_hash(&dir.path().join("c")), baseline);
}
