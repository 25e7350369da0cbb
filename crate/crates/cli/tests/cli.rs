use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use switchdiff::Verdict;
use switchdiff_cli::args::Overrides;
use switchdiff_cli::pipeline::{load, prepare};
use switchdiff_cli::presets::{self, Stage};
use switchdiff_cli::report::sha256_hex;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn switchdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_switchdiff"))
        .args(args)
        .env_remove("SWITCHDIFF_THREADS")
        .output()
        .unwrap()
}

#[test]
fn malformed_scenario_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"name\": \"x\",\n  \"model\": 3\n}").unwrap();
    let out = switchdiff(&["analyze", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 3"), "{stderr}");

    let missing = switchdiff(&["analyze", "--scenario", "/definitely/not/here.json"]);
    assert_eq!(missing.status.code(), Some(2));
    let unknown = switchdiff(&["reproduce", "no_such_preset"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn invalid_override_and_thread_count_exit_with_2() {
    let path = scenario("example52.json");
    let out = switchdiff(&["analyze", "--scenario", path.to_str().unwrap(), "--truncation", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_switchdiff"))
        .args(["analyze", "--scenario", path.to_str().unwrap()])
        .env("SWITCHDIFF_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn example52_analysis_certifies_stability() {
    let mut job = load("analyze", &scenario("example52.json"), &Overrides::default(), None).unwrap();
    job.run(&[Stage::Analyze]).unwrap();
    let verdict = |name: &str| {
        job.report
            .criterion
            .iter()
            .find(|r| r.theorem.name() == name)
            .unwrap_or_else(|| panic!("{name} not checked"))
            .verdict
    };
    assert_eq!(verdict("T3_1"), Verdict::StableCertified);
    assert_eq!(verdict("T3_2"), Verdict::Inconclusive);
    let p41 = job.report.proposition41.as_ref().unwrap();
    assert_eq!(p41.symmetric.verdict, Verdict::StableCertified);
    let nu = &job.report.invariant_measure.as_ref().unwrap().nu;
    assert!((nu[0] - 0.5).abs() < 1e-12);
}

#[test]
fn example51_analysis() {
    let mut job = load("analyze", &scenario("example51.json"), &Overrides::default(), None).unwrap();
    job.run(&[Stage::Analyze]).unwrap();
    let t32 = job.report.criterion.iter().find(|r| r.theorem.name() == "T3_2").unwrap();
    assert_eq!(t32.verdict, Verdict::StableCertified);
    assert!(t32.mean_drift < 0.0);
    assert!(job.report.birth_death.is_some());
}

#[test]
fn scenario_hash_tracks_bytes() {
    let p = presets::find("example52").unwrap();
    let a = prepare("analyze", p.json.as_bytes(), "a".into(), &Overrides::default(), None).unwrap();
    let edited = p.json.replacen("\"seed\": 2024", "\"seed\": 2025", 1);
    assert_ne!(edited, p.json);
    let b = prepare("analyze", edited.as_bytes(), "b".into(), &Overrides::default(), None).unwrap();
    assert_eq!(a.report.provenance.scenario_sha256, sha256_hex(p.json.as_bytes()));
    assert_ne!(a.report.provenance.scenario_sha256, b.report.provenance.scenario_sha256);
    assert_eq!(b.report.provenance.seed, 2025);
}

#[test]
fn overrides_are_applied_and_recorded() {
    let overrides = Overrides {
        seed: Some(9),
        paths: Some(3),
        x0: Some(vec![0.01]),
        ..Default::default()
    };
    let job = load("simulate", &scenario("example52.json"), &overrides, None).unwrap();
    assert_eq!(job.built.sim.seed, 9);
    assert_eq!(job.built.sim.x0, vec![0.01, 0.0]);
    assert_eq!(job.scenario.mc.n_paths, 3);
    let recorded = &job.report.provenance.overrides;
    assert_eq!(recorded.get("seed").map(String::as_str), Some("9"));
    assert!(recorded.contains_key("x0"));
}

#[test]
fn failed_stage_leaves_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    // example52 lists no δ-sweep radii, so the second stage fails.
    let mut job = load("reproduce", &scenario("example52.json"), &Overrides::default(), Some(out.clone())).unwrap();
    assert!(job.run(&[Stage::Analyze, Stage::DeltaSweep]).is_err());
    assert!(job.report.partial);
    assert!(out.join("invariant_measure.csv").exists());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["partial"], serde_json::Value::Bool(true));
    assert_eq!(report["stages"][1]["completed"], serde_json::Value::Bool(false));
}

#[test]
fn simulate_writes_identical_csvs_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("example52.json");
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = switchdiff(&[
            "simulate",
            "--scenario",
            path.to_str().unwrap(),
            "--paths",
            "6",
            "--horizon",
            "0.5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    }
    for k in 0..4 {
        let rel = format!("trajectories/path_{k:05}.csv");
        let a = std::fs::read(dir.path().join("a").join(&rel)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&rel)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{rel}");
    }
    assert!(!dir.path().join("a/trajectories/path_00004.csv").exists());
}

#[test]
fn exponential_proposals_run_with_a_bounded_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let out = switchdiff(&[
        "simulate",
        "--scenario",
        scenario("two_state.json").to_str().unwrap(),
        "--scheme",
        "exponential_proposals",
        "--horizon",
        "10",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["parameters"]["sim"]["scheme"], "exponential_proposals");
}

#[test]
fn presets_parse_and_list() {
    for p in presets::PRESETS {
        prepare("reproduce", p.json.as_bytes(), p.name.into(), &Overrides::default(), None)
            .unwrap_or_else(|e| panic!("{}: {e:#}", p.name));
    }
    let out = switchdiff(&["reproduce", "list"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for p in presets::PRESETS {
        assert!(text.contains(p.name), "{text}");
    }
}
