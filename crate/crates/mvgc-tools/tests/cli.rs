//! Black-box tests of the `mvgc` binary: exit codes, determinism and the
//! shape of its outputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn mvgc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvgc")).args(args).output().expect("spawning mvgc")
}

fn mvgc_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mvgc"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawning mvgc")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

fn gen_rig(dir: &Path) -> std::path::PathBuf {
    let rig = dir.join("rig.json");
    let out = mvgc(&["rig", "gen", "--preset", "nuscenes6", "--output", rig.to_str().unwrap()]);
    assert_code(&out, 0);
    rig
}

/// Bundle contents excluding manifests, which record wall time and argv.
fn bundle_payload(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.file_name().unwrap().to_str().unwrap().contains("manifest"))
        .map(|p| (p.file_name().unwrap().to_str().unwrap().to_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn rig_gen_writes_rig_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let rig = gen_rig(tmp.path());
    let text = fs::read_to_string(&rig).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["views"].as_array().unwrap().len(), 6);
    let manifest = tmp.path().join("rig.json.manifest.json");
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
    assert_eq!(m["command"], "rig gen");
}

#[test]
fn unknown_preset_is_a_usage_error_listing_presets() {
    let tmp = TempDir::new().unwrap();
    let rig = tmp.path().join("rig.json");
    let out = mvgc(&["rig", "gen", "--preset", "kitti", "--output", rig.to_str().unwrap()]);
    assert_code(&out, 2);
    let err = stderr(&out);
    for name in ["nuscenes6", "front3", "mono1"] {
        assert!(err.contains(name), "stderr does not list {name}: {err}");
    }
    assert!(!rig.exists());
}

#[test]
fn rig_perturb_applies_a_height_shift() {
    let tmp = TempDir::new().unwrap();
    let rig = gen_rig(tmp.path());
    let shifted = tmp.path().join("shifted.json");
    let out = mvgc(&[
        "rig",
        "perturb",
        "--mode",
        "height",
        "--dz",
        "0.65",
        "--input",
        rig.to_str().unwrap(),
        "--output",
        shifted.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let a: serde_json::Value = serde_json::from_str(&fs::read_to_string(&rig).unwrap()).unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&shifted).unwrap()).unwrap();
    for (va, vb) in
        a["views"].as_array().unwrap().iter().zip(b["views"].as_array().unwrap())
    {
        let za = va["translation"][2].as_f64().unwrap();
        let zb = vb["translation"][2].as_f64().unwrap();
        assert!((zb - za - 0.65).abs() < 1e-12);
    }

    let bad = mvgc(&[
        "rig",
        "perturb",
        "--mode",
        "sideways",
        "--input",
        rig.to_str().unwrap(),
        "--output",
        shifted.to_str().unwrap(),
    ]);
    assert_code(&bad, 2);
}

#[test]
fn synth_is_deterministic_and_thread_independent() {
    let tmp = TempDir::new().unwrap();
    let rig = gen_rig(tmp.path());
    let run = |dir: &Path, threads: &str| {
        let out = mvgc_env(
            &[
                "synth",
                "--rig",
                rig.to_str().unwrap(),
                "--scene",
                "sphere-room",
                "--seed",
                "7",
                "--frames",
                "2",
                "--output",
                dir.to_str().unwrap(),
            ],
            &[("MVGC_THREADS", threads)],
        );
        assert_code(&out, 0);
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run(&a, "1");
    run(&b, "4");
    let pa = bundle_payload(&a);
    let pb = bundle_payload(&b);
    assert!(!pa.is_empty());
    assert_eq!(pa.len(), pb.len());
    for ((na, da), (nb, db)) in pa.iter().zip(&pb) {
        assert_eq!(na, nb);
        assert_eq!(da, db, "file {na} differs between runs");
    }
    assert!(a.join("manifest.json").exists());
}

#[test]
fn synth_rejects_zero_frames() {
    let tmp = TempDir::new().unwrap();
    let rig = gen_rig(tmp.path());
    let dir = tmp.path().join("bundle");
    let out = mvgc(&[
        "synth",
        "--rig",
        rig.to_str().unwrap(),
        "--frames",
        "0",
        "--output",
        dir.to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn consist_eval_reports_tiny_losses_at_ground_truth() {
    let tmp = TempDir::new().unwrap();
    let rig = gen_rig(tmp.path());
    let dir = tmp.path().join("bundle");
    let out = mvgc(&[
        "synth",
        "--rig",
        rig.to_str().unwrap(),
        "--output",
        dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let out = mvgc(&[
        "consist",
        "eval",
        "--rig",
        rig.to_str().unwrap(),
        "--input",
        dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(report["l_ov"].as_f64().unwrap() < 1e-3);
    assert!(report["l_p"].as_f64().unwrap() < 1e-2);
    assert_eq!(report["per_pair"].as_array().unwrap().len(), 36);
}

#[test]
fn gradcheck_passes_and_fails_by_threshold() {
    let tmp = TempDir::new().unwrap();
    let rig = gen_rig(tmp.path());
    let ok = mvgc(&[
        "consist",
        "gradcheck",
        "--rig",
        rig.to_str().unwrap(),
        "--samples",
        "100",
    ]);
    assert_code(&ok, 0);
    let report: serde_json::Value = serde_json::from_str(&stdout(&ok)).unwrap();
    assert_eq!(report["checked"].as_u64(), Some(100));
    assert!(report["max_rel_err"].as_f64().unwrap() < 1e-4);

    let fail = mvgc(&[
        "consist",
        "gradcheck",
        "--rig",
        rig.to_str().unwrap(),
        "--samples",
        "100",
        "--threshold",
        "1e-18",
    ]);
    assert_code(&fail, 3);
}

#[test]
fn shift_study_writes_monotone_csv() {
    let tmp = TempDir::new().unwrap();
    let rig = gen_rig(tmp.path());
    let csv = tmp.path().join("study.csv");
    let out = mvgc(&[
        "consist",
        "shift-study",
        "--rig",
        rig.to_str().unwrap(),
        "--output",
        csv.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.contains("mode,dx,dy,dz,dpitch,dyaw,l_ov,l_p,ov_count"));
    let lov: Vec<f64> = text
        .lines()
        .filter(|l| l.starts_with("Height"))
        .map(|l| l.split(',').nth(6).unwrap().parse().unwrap())
        .collect();
    assert_eq!(lov.len(), 3);
    assert!(lov[0] < lov[1] && lov[1] < lov[2]);

    let bad = mvgc(&[
        "consist",
        "shift-study",
        "--rig",
        rig.to_str().unwrap(),
        "--dz",
        "0.2,0.65",
        "--output",
        csv.to_str().unwrap(),
    ]);
    assert_code(&bad, 2);
}

#[test]
fn adapter_bench_prints_the_structure_table() {
    let out = mvgc(&["adapter", "bench"]);
    assert_code(&out, 0);
    let text = stdout(&out);
    for variant in ["H ", "B ", "S ", "T ", "ours"] {
        assert!(text.contains(variant), "missing variant {variant:?} in:\n{text}");
    }
    assert!(text.contains("symmetry and ordering hold"), "{text}");
}

#[test]
fn adapter_demo_validates_the_label_fraction() {
    let ok = mvgc(&["adapter", "demo", "--k-percent", "0.05"]);
    assert_code(&ok, 0);
    let bad = mvgc(&["adapter", "demo", "--k-percent", "0"]);
    assert_code(&bad, 2);
}

#[test]
fn metrics_commands_print_published_values() {
    let nds = mvgc(&[
        "metrics", "nds", "--map", "0.475", "--mate", "0.577", "--mase", "0.177", "--maoe",
        "0.147",
    ]);
    assert_code(&nds, 0);
    assert!(stdout(&nds).contains("NDS* = 0.587"));

    let gap = mvgc(&[
        "metrics",
        "closed-gap",
        "--model",
        "0.421",
        "--dt",
        "0.213",
        "--oracle",
        "0.587",
    ]);
    assert_code(&gap, 0);
    assert!(stdout(&gap).contains("+55.6%"));

    let degenerate = mvgc(&[
        "metrics",
        "closed-gap",
        "--model",
        "0.4",
        "--dt",
        "0.5",
        "--oracle",
        "0.5",
    ]);
    assert_code(&degenerate, 2);
}

#[test]
fn metrics_match_scores_perfect_predictions() {
    let tmp = TempDir::new().unwrap();
    let boxes = serde_json::json!([
        {"cx": 1.0, "cy": 2.0, "cz": 0.5, "l": 4.0, "w": 2.0, "h": 1.5, "yaw": 0.3, "score": 0.9},
        {"cx": -5.0, "cy": 3.0, "cz": 0.8, "l": 3.5, "w": 1.8, "h": 1.4, "yaw": -1.2, "score": 0.8}
    ]);
    let gts = tmp.path().join("gts.json");
    let preds = tmp.path().join("preds.json");
    fs::write(&gts, serde_json::to_string_pretty(&boxes).unwrap()).unwrap();
    fs::write(&preds, serde_json::to_string_pretty(&boxes).unwrap()).unwrap();
    let out = mvgc(&[
        "metrics",
        "match",
        "--preds",
        preds.to_str().unwrap(),
        "--gts",
        gts.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("1.000"), "expected a perfect score in:\n{text}");
}

#[test]
fn missing_subcommand_is_a_usage_error_and_help_is_not() {
    let none = mvgc(&[]);
    assert_code(&none, 2);
    let help = mvgc(&["--help"]);
    assert_code(&help, 0);
    assert!(stdout(&help).contains("consist"));
}
