use std::path::Path;
use std::process::{Command, Output};

use voxreg_core::io::{fvl1, nifti, read_report};

fn voxreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxreg"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .last()
        .unwrap_or("")
        .to_string()
}

const FAST: [&str; 6] = [
    "--set",
    "convex.search_radius=3",
    "--set",
    "adam.iterations=5",
    "--set",
    "convex.grid_stride=4",
];

fn synth(dir: &Path, seed: u64, cap: f64) {
    let out = voxreg(&[
        "synth",
        "--size",
        "24",
        "--seed",
        &seed.to_string(),
        "--cap",
        &cap.to_string(),
        "--out-dir",
        s(dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn identity_registration_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 1, 2.0);
    let fixed = d.join("fixed.nii.gz");
    let seg = d.join("fixed_seg.nii.gz");
    let report = d.join("report.json");
    let mut args = vec![
        "register",
        "--fixed",
        s(&fixed),
        "--moving",
        s(&fixed),
        "--fixed-seg",
        s(&seg),
        "--moving-seg",
        s(&seg),
        "--out-disp",
    ];
    let disp = d.join("disp.fvl1");
    let meta = d.join("meta.json");
    args.push(s(&disp));
    args.extend([
        "--out-report",
        s(&report),
        "--out-meta",
        s(&meta),
        "--seed",
        "7",
    ]);
    args.extend(FAST);
    let out = voxreg(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = read_report(&report).unwrap();
    assert_eq!(r.dice_mean, 1.0);
    assert_eq!(r.folding_pct, 0.0);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&meta).unwrap()).unwrap();
    assert_eq!(meta["seed"], 7);
    assert_eq!(meta["config"]["convex"]["search_radius"], 3);

    // standalone metrics agrees with the in-line report
    let report2 = d.join("report2.json");
    let out = voxreg(&[
        "metrics",
        "--disp",
        s(&disp),
        "--fixed-seg",
        s(&seg),
        "--moving-seg",
        s(&seg),
        "--out-report",
        s(&report2),
    ]);
    assert!(out.status.success());
    assert_eq!(read_report(&report2).unwrap(), r);
}

#[test]
fn eval_pairs_summary_matches_per_pair_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut manifest = String::new();
    for i in 0..3 {
        let pd = d.join(format!("p{i}"));
        synth(&pd, 10 + i, 2.0);
        // relative paths resolve against the manifest directory
        manifest.push_str(&format!(
            "p{i}/fixed.nii.gz\tp{i}/moving.nii.gz\tp{i}/fixed_seg.nii.gz\tp{i}/moving_seg.nii.gz\n"
        ));
    }
    std::fs::write(d.join("pairs.tsv"), manifest).unwrap();
    let summary_path = d.join("summary.json");
    let out_dir = d.join("out");
    let mut args = vec![
        "eval-pairs",
        "--manifest",
        s(&d.join("pairs.tsv")).to_owned().leak(),
        "--out-dir",
        s(&out_dir),
        "--out-report",
        s(&summary_path),
        "--jobs",
        "2",
    ];
    args.extend(FAST);
    let out = voxreg(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&summary_path).unwrap()).unwrap();
    let pairs = summary["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 3);
    let mut dice = Vec::new();
    let mut sdlogj = Vec::new();
    let mut folding = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let r = read_report(&out_dir.join(format!("pair_{i:03}")).join("report.json")).unwrap();
        assert_eq!(p["dice_mean"].as_f64().unwrap(), r.dice_mean);
        dice.push(r.dice_mean);
        sdlogj.push(r.sdlogj);
        folding.push(r.folding_pct);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let std = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    };
    assert_eq!(summary["dice_mean"]["mean"].as_f64().unwrap(), mean(&dice));
    assert_eq!(summary["dice_mean"]["std"].as_f64().unwrap(), std(&dice));
    assert_eq!(summary["sdlogj"]["mean"].as_f64().unwrap(), mean(&sdlogj));
    assert_eq!(
        summary["folding_pct"]["mean"].as_f64().unwrap(),
        mean(&folding)
    );
}

#[test]
fn missing_required_flag_is_usage_error() {
    let out = voxreg(&["register", "--fixed", "a.nii", "--out-disp", "d.fvl1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--moving"), "{err}");
    assert!(err.contains("Usage"), "{err}");
    assert!(stderr_line(&out).starts_with("voxreg: error code=2 kind=usage"));
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxreg(&[
        "register",
        "--fixed",
        "/nonexistent/a.nii",
        "--moving",
        "/nonexistent/b.nii",
        "--out-disp",
        s(&dir.path().join("d.fvl1")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).starts_with("voxreg: error code=3 kind=io"));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
}

#[test]
fn corrupt_inputs_and_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 2, 1.0);
    // a NIfTI where FVL1 is expected
    let out = voxreg(&[
        "metrics",
        "--disp",
        s(&d.join("fixed.nii.gz")),
        "--fixed-seg",
        s(&d.join("fixed_seg.nii.gz")),
        "--moving-seg",
        s(&d.join("moving_seg.nii.gz")),
        "--out-report",
        s(&d.join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).contains("magic"), "{}", stderr_line(&out));

    let out = voxreg(&[
        "register",
        "--fixed",
        s(&d.join("fixed.nii.gz")),
        "--moving",
        s(&d.join("moving.nii.gz")),
        "--out-disp",
        s(&d.join("x.fvl1")),
        "--set",
        "convex.no_such_key=1",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = voxreg(&[
        "register",
        "--fixed",
        s(&d.join("fixed.nii.gz")),
        "--moving",
        s(&d.join("moving.nii.gz")),
        "--out-disp",
        s(&d.join("x.fvl1")),
        "--features",
        "external",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn external_features_via_mind_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 3, 2.0);
    for (img, feat) in [("fixed.nii.gz", "ff.fvl1"), ("moving.nii.gz", "mf.fvl1")] {
        let out = voxreg(&[
            "mind",
            "--input",
            s(&d.join(img)),
            "--out",
            s(&d.join(feat)),
        ]);
        assert!(out.status.success());
    }
    let fv = fvl1::read_fvl1(&d.join("ff.fvl1")).unwrap();
    assert_eq!(fv.channels(), 12);
    let disp = d.join("disp.fvl1");
    let warped = d.join("warped.nii.gz");
    let mut args = vec![
        "register",
        "--fixed",
        s(&d.join("fixed.nii.gz")).to_owned().leak(),
        "--moving",
        s(&d.join("moving.nii.gz")).to_owned().leak(),
        "--features",
        "external",
        "--fixed-feat",
        s(&d.join("ff.fvl1")).to_owned().leak(),
        "--moving-feat",
        s(&d.join("mf.fvl1")).to_owned().leak(),
        "--out-disp",
        s(&disp),
        "--out-warped",
        s(&warped),
    ];
    args.extend(FAST);
    let out = voxreg(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let u = fvl1::read_displacement(&disp).unwrap();
    let w = nifti::read_volume(&warped).unwrap();
    assert_eq!(u.geometry().dims(), w.geometry().dims());
}

#[test]
fn config_file_and_help() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "convex.search_radius = 2\nadam.iterations = 2\n").unwrap();
    synth(dir.path(), 5, 1.0);
    let f = dir.path().join("fixed.nii.gz");
    let out = voxreg(&[
        "register",
        "--fixed",
        s(&f),
        "--moving",
        s(&f),
        "--config",
        s(&cfg),
        "--out-disp",
        s(&dir.path().join("d.fvl1")),
        "--out-trace",
        s(&dir.path().join("t.csv")),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);

    let out = voxreg(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("eval-pairs"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            voxreg_core::RegistrationConfig::from_file(&path).unwrap();
            n += 1;
        }
    }
    assert!(n >= 3);
}
