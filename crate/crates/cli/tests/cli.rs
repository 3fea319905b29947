use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn saber(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saber"))
        .args(args)
        .env_remove("SABER_SEED")
        .output()
        .expect("spawn saber")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn simulate(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("data-{seed}"));
    let o = saber(&[
        "simulate",
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
        "--rate",
        "500",
        "--trials-per-block",
        "36",
        "--blocks",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(
        &p,
        r#"{"iem": {"n_trialset_iterations": 2, "n_perm_labelsets": 4, "n_perm_repeats": 5},
            "stats": {"n_iter": 100}, "lateralization_null_perms": 20}"#,
    )
    .unwrap();
    p
}

#[test]
fn simulate_prints_plan_summary() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    let o = saber(&["simulate", "--seed", "3", "--out", out.to_str().unwrap(), "--rate", "500", "--trials-per-block", "12", "--blocks", "1"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.starts_with("48 trials"), "{text}");
    for c in ["SS", "SM", "DS", "DM"] {
        assert!(text.lines().any(|l| l.starts_with(c) && l.split_whitespace().skip(1).all(|n| n == "2")), "{text}");
    }
    assert!(out.join("manifests/simulate.json").is_file());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();
    // missing seed
    assert_eq!(code(&saber(&["simulate", "--out", out])), 2);
    // unknown flag and missing subcommand
    assert_eq!(code(&saber(&["simulate", "--seed", "1", "--out", out, "--bogus"])), 2);
    assert_eq!(code(&saber(&[])), 2);
    // unsatisfiable plan
    assert_eq!(code(&saber(&["simulate", "--seed", "1", "--out", out, "--bins", "0", "--trials-per-block", "4"])), 2);
    // sampling rate below the minimum
    assert_eq!(code(&saber(&["simulate", "--seed", "1", "--out", out, "--rate", "100"])), 2);
    // unknown nested config field
    let data = simulate(tmp.path(), 1);
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"iem": {"n_permutations": 3}}"#).unwrap();
    let o = saber(&["run", cfg.to_str().unwrap(), "--input", data.to_str().unwrap(), "--out", out, "--seed", "1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_permutations"));
}

#[test]
fn seed_comes_from_env_when_no_flag() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let common = ["--rate", "500", "--trials-per-block", "12", "--blocks", "1"];
    let o = Command::new(env!("CARGO_BIN_EXE_saber"))
        .args(["simulate", "--out", a.to_str().unwrap()])
        .args(common)
        .env("SABER_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let o = saber(&[&["simulate", "--seed", "11", "--out", b.to_str().unwrap()][..], &common[..]].concat());
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(a.join("events.csv")).unwrap(), fs::read(b.join("events.csv")).unwrap());
}

#[test]
fn existing_output_needs_force() {
    let tmp = TempDir::new().unwrap();
    let data = simulate(tmp.path(), 1);
    let o = saber(&["simulate", "--seed", "1", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    // a foreign directory is never overwritten
    let foreign = tmp.path().join("mine");
    fs::create_dir(&foreign).unwrap();
    fs::write(foreign.join("notes.txt"), "keep").unwrap();
    let o = saber(&["simulate", "--seed", "1", "--out", foreign.to_str().unwrap(), "--force"]);
    assert_eq!(code(&o), 2);
    assert!(foreign.join("notes.txt").is_file());
}

#[test]
fn failed_stage_leaves_marker_and_blocks_rerun() {
    let tmp = TempDir::new().unwrap();
    let data = simulate(tmp.path(), 2);
    // truncate the sample file so reading fails after the run has started
    let raw = data.join("data.f32le");
    let bytes = fs::read(&raw).unwrap();
    fs::write(&raw, &bytes[..bytes.len() / 2]).unwrap();
    let out = tmp.path().join("run");
    let cfg = small_config(tmp.path());
    let args = ["run", cfg.to_str().unwrap(), "--input", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "1"];
    let o = saber(&args);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let marker = fs::read_to_string(out.join("FAILED")).unwrap();
    assert!(marker.contains("sub-01"), "{marker}");
    assert!(!out.join("report.json").exists());
    assert_eq!(code(&saber(&args)), 2);
    fs::write(&raw, &bytes).unwrap();
    let o = saber(&[&args[..], &["--force"][..]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("FAILED").exists());
}

#[test]
fn run_writes_manifests_and_respects_toggles() {
    let tmp = TempDir::new().unwrap();
    let data = simulate(tmp.path(), 4);
    let cfg = small_config(tmp.path());
    let full = tmp.path().join("full");
    let no_erp = tmp.path().join("no-erp");
    for (out, extra) in [(&full, None), (&no_erp, Some("--no-erp"))] {
        let mut args = vec!["run", cfg.to_str().unwrap(), "--input", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "5"];
        args.extend(extra);
        let o = saber(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let sub = full.join("sub-01");
    for f in ["erp.csv", "erp.json", "lateralization.csv", "iem.json", "slope.csv", "crf.csv", "preprocess.json"] {
        assert!(sub.join(f).is_file(), "{f}");
    }
    for m in ["preprocess", "erp", "lateralize", "iem"] {
        let text = fs::read_to_string(sub.join("manifests").join(format!("{m}.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["config_sha256"].as_str().unwrap().len(), 64);
        assert!(!v["inputs"].as_array().unwrap().is_empty());
    }
    assert!(full.join("plots/slope.svg").is_file());
    assert!(full.join("plots/lateralization.svg").is_file());

    let sub2 = no_erp.join("sub-01");
    assert!(!sub2.join("erp.csv").exists() && !sub2.join("erp.json").exists());
    assert!(!sub2.join("manifests/erp.json").exists());
    for f in ["lateralization.csv", "iem.json", "slope.csv"] {
        assert_eq!(fs::read(sub.join(f)).unwrap(), fs::read(sub2.join(f)).unwrap(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(no_erp.join("report.json")).unwrap()).unwrap();
    assert!(report["subjects"][0]["erp_window_amplitude"].is_null());
}

#[test]
fn stage_subcommands_chain_into_stats() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let mut stage_dirs = Vec::new();
    for seed in [6, 7] {
        let data = simulate(tmp.path(), seed);
        let pre = tmp.path().join(format!("pre-{seed}"));
        let o = saber(&["preprocess", "--input", data.to_str().unwrap(), "--out", pre.to_str().unwrap(), "--config", cfg, "--seed", "1"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(pre.join("clean/meta.json").is_file());
        let iem = tmp.path().join(format!("iem-{seed}"));
        let o = saber(&["iem", "--input", pre.to_str().unwrap(), "--out", iem.to_str().unwrap(), "--config", cfg, "--seed", "1"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(iem.join("slope.csv").is_file() && !iem.join("erp.csv").exists());
        stage_dirs.push(iem);
    }
    let out = tmp.path().join("stats");
    let o = saber(&[
        "stats", "--input", stage_dirs[0].to_str().unwrap(), "--input", stage_dirs[1].to_str().unwrap(),
        "--out", out.to_str().unwrap(), "--config", cfg, "--seed", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["n_subjects"], 2);
    assert!(stats["iem_vs_permuted"]["SS"].is_object());
}

#[test]
fn validate_reports_violations() {
    let tmp = TempDir::new().unwrap();
    let data = simulate(tmp.path(), 9);
    let o = saber(&["validate", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("0 violations"));

    // two consecutive trials in the same bin
    let events = fs::read_to_string(data.join("events.csv")).unwrap();
    let mut lines: Vec<String> = events.lines().map(String::from).collect();
    let header: Vec<String> = lines[0].split(',').map(String::from).collect();
    let mut fields: Vec<String> = lines[2].split(',').map(String::from).collect();
    let first: Vec<String> = lines[1].split(',').map(String::from).collect();
    for col in ["code", "condition", "bin", "angle_deg"] {
        let i = header.iter().position(|h| h == col).unwrap();
        fields[i] = first[i].clone();
    }
    lines[2] = fields.join(",");
    let repeated = tmp.path().join("repeated");
    fs::create_dir(&repeated).unwrap();
    for f in ["meta.json", "data.f32le"] {
        fs::copy(data.join(f), repeated.join(f)).unwrap();
    }
    fs::write(repeated.join("events.csv"), lines.join("\n") + "\n").unwrap();
    let o = saber(&["validate", repeated.to_str().unwrap(), "--trials-per-block", "36"]);
    assert_eq!(code(&o), 1);
    let text = stdout(&o);
    assert!(text.contains("violation:") && text.contains("repeat"), "{text}");
    assert!(!text.contains("\n0 violations"));

    // sample file shorter than the header says
    let raw = data.join("data.f32le");
    let bytes = fs::read(&raw).unwrap();
    fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
    let o = saber(&["validate", data.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("1 violations"), "{}", stdout(&o));
}
