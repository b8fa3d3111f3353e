//! End-to-end tests of the command-line interface against the shipped demo
//! instance.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cloakctl")
}

fn demo(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo").join(file)
}

fn work_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cloakctl-test-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn cloakctl")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn keygen_is_deterministic_and_sized() {
    let dir = work_dir("keygen");
    let sys = demo("double_integrator.system.json");
    for sub in ["a", "b"] {
        let out = run(&[
            "keygen",
            "--system",
            sys.to_str().unwrap(),
            "--scenario",
            "1",
            "--seed",
            "7",
            "--out",
            dir.join(sub).to_str().unwrap(),
        ]);
        assert_success(&out);
    }
    let a = fs::read(dir.join("a/key.json")).unwrap();
    let b = fs::read(dir.join("b/key.json")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical key files");

    // free parameter count for (n, m, p) = (2, 1, 2):
    // P has 2x3 free entries, F 1x3, G 1x1, S 2x3 free entries
    let key: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(key["P"].as_array().unwrap().len(), 3);
    assert_eq!(key["F"].as_array().unwrap().len(), 1);
    assert_eq!(key["G"].as_array().unwrap().len(), 1);
    assert_eq!(key["S"].as_array().unwrap().len(), 3);
    assert!(key["condition_number"].as_f64().unwrap() < 1e8);
}

#[test]
fn keygen_scenario3_records_fixed_point_residual() {
    let dir = work_dir("keygen3");
    let out = run(&[
        "keygen",
        "--system",
        demo("double_integrator.system.json").to_str().unwrap(),
        "--scenario",
        "3",
        "--seed",
        "5",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    let key: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("key.json")).unwrap()).unwrap();
    assert_eq!(key["scenario"], 3);
    let residual = key["fixed_point_residual"].as_f64().unwrap();
    assert!(residual <= 1e-8, "fixed point residual {residual}");
}

#[test]
fn simulate_matches_direct_baseline() {
    let started = Instant::now();
    let dir = work_dir("simulate");
    let sys = demo("double_integrator.system.json");
    let obj = demo("tracking.objective.json");
    let keys = dir.join("keys");
    assert_success(&run(&[
        "keygen",
        "--system",
        sys.to_str().unwrap(),
        "--scenario",
        "1",
        "--seed",
        "42",
        "--out",
        keys.to_str().unwrap(),
    ]));
    assert_success(&run(&[
        "simulate",
        "--system",
        sys.to_str().unwrap(),
        "--objective",
        obj.to_str().unwrap(),
        "--key",
        keys.join("key.json").to_str().unwrap(),
        "--steps",
        "30",
        "--out",
        dir.join("private").to_str().unwrap(),
    ]));
    assert_success(&run(&[
        "direct",
        "--system",
        sys.to_str().unwrap(),
        "--objective",
        obj.to_str().unwrap(),
        "--steps",
        "30",
        "--out",
        dir.join("baseline").to_str().unwrap(),
    ]));
    assert!(
        started.elapsed().as_secs() < 10,
        "demo must complete in under ten seconds"
    );

    let private: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("private/report.json")).unwrap())
            .unwrap();
    let baseline: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("baseline/report.json")).unwrap())
            .unwrap();
    let c1 = private["cost"].as_f64().unwrap();
    let c2 = baseline["cost"].as_f64().unwrap();
    assert!((c1 - c2).abs() / c2 <= 1e-5, "cost gap {}", (c1 - c2).abs() / c2);

    // output files exist and the transcript has the right shape
    let transcript = fs::read_to_string(dir.join("private/transcript.jsonl")).unwrap();
    let first: serde_json::Value =
        serde_json::from_str(transcript.lines().next().unwrap()).unwrap();
    assert_eq!(first["msg"]["type"], "handshake");
    assert_eq!(transcript.lines().count(), 1 + 2 * 30);
    let csv = fs::read_to_string(dir.join("private/trajectory.csv")).unwrap();
    assert!(csv.starts_with("k,x0,x1,u0,y0,y1"));
    assert_eq!(csv.lines().count(), 1 + 30);
}

#[test]
fn tcp_and_in_process_transcripts_agree() {
    let dir = work_dir("tcp");
    let sys = demo("double_integrator.system.json");
    let obj = demo("tracking.objective.json");
    let keys = dir.join("keys");
    assert_success(&run(&[
        "keygen",
        "--system",
        sys.to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        keys.to_str().unwrap(),
    ]));
    for (mode, out_dir) in [("in-process", "local"), ("tcp", "remote")] {
        assert_success(&run(&[
            "simulate",
            "--system",
            sys.to_str().unwrap(),
            "--objective",
            obj.to_str().unwrap(),
            "--key",
            keys.join("key.json").to_str().unwrap(),
            "--steps",
            "10",
            "--transport",
            mode,
            "--out",
            dir.join(out_dir).to_str().unwrap(),
        ]));
    }
    let a = fs::read_to_string(dir.join("local/transcript.jsonl")).unwrap();
    let b = fs::read_to_string(dir.join("remote/transcript.jsonl")).unwrap();
    assert_eq!(a, b, "transports must record identical transcripts");
}

#[test]
fn external_cloud_service() {
    let dir = work_dir("serve");
    let sys = demo("double_integrator.system.json");
    let obj = demo("tracking.objective.json");
    let keys = dir.join("keys");
    assert_success(&run(&[
        "keygen",
        "--system",
        sys.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        keys.to_str().unwrap(),
    ]));
    let mut server = Command::new(bin())
        .args(["serve", "--listen", "127.0.0.1:47719"])
        .spawn()
        .expect("spawn serve");
    std::thread::sleep(std::time::Duration::from_millis(300));
    let out = run(&[
        "simulate",
        "--system",
        sys.to_str().unwrap(),
        "--objective",
        obj.to_str().unwrap(),
        "--key",
        keys.join("key.json").to_str().unwrap(),
        "--steps",
        "5",
        "--transport",
        "tcp",
        "--connect",
        "127.0.0.1:47719",
        "--out",
        dir.join("external").to_str().unwrap(),
    ]);
    server.kill().ok();
    server.wait().ok();
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("external/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["steps"], 5);
}

#[test]
fn privacy_report_values() {
    let out = run(&[
        "privacy-report",
        "--system",
        demo("double_integrator.system.json").to_str().unwrap(),
        "--objective",
        demo("tracking.objective.json").to_str().unwrap(),
        "--scenario",
        "1",
        "--json",
    ]);
    assert_success(&out);
    let rep: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["dim_group"], 16);
    assert_eq!(rep["dim_stabilizer_omega"], 0);
    assert_eq!(rep["uncertainty_dim"], 16);

    // side knowledge subtracts exactly
    let out = run(&[
        "privacy-report",
        "--system",
        demo("double_integrator.system.json").to_str().unwrap(),
        "--objective",
        demo("tracking.objective.json").to_str().unwrap(),
        "--scenario",
        "1",
        "--side-k",
        "3",
        "--json",
    ]);
    assert_success(&out);
    let rep: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["uncertainty_dim"], 13);
}

#[test]
fn verify_passes_on_demo_and_names_failures() {
    let dir = work_dir("verify");
    let sys = demo("double_integrator.system.json");
    let obj = demo("tracking.objective.json");
    let keys = dir.join("keys");
    assert_success(&run(&[
        "keygen",
        "--system",
        sys.to_str().unwrap(),
        "--seed",
        "42",
        "--out",
        keys.to_str().unwrap(),
    ]));
    let out = run(&[
        "verify",
        "--system",
        sys.to_str().unwrap(),
        "--objective",
        obj.to_str().unwrap(),
        "--key",
        keys.join("key.json").to_str().unwrap(),
    ]);
    assert_success(&out);
    let checks: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(checks.as_array().unwrap().iter().all(|c| c["pass"] == true));

    // corrupt the key: singular G must fail the invertibility check by name
    let mut key: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(keys.join("key.json")).unwrap()).unwrap();
    key["G"] = serde_json::json!([[0.0]]);
    let bad = dir.join("bad_key.json");
    fs::write(&bad, serde_json::to_string(&key).unwrap()).unwrap();
    let out = run(&[
        "verify",
        "--system",
        sys.to_str().unwrap(),
        "--objective",
        obj.to_str().unwrap(),
        "--key",
        bad.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let checks: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let failed: Vec<&str> = checks
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["pass"] == false)
        .map(|c| c["check"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"key-invertibility"), "failed: {failed:?}");

    // mismatched dimensions must fail the dims check by name
    let small_system = dir.join("small.system.json");
    fs::write(
        &small_system,
        r#"{"A": [[0.5]], "B": [[1.0]], "C": [[1.0]], "c": [0.0], "d": [0.0]}"#,
    )
    .unwrap();
    let out = run(&[
        "verify",
        "--system",
        small_system.to_str().unwrap(),
        "--objective",
        obj.to_str().unwrap(),
        "--key",
        keys.join("key.json").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let checks: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let failed: Vec<&str> = checks
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["pass"] == false)
        .map(|c| c["check"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"dims"), "failed: {failed:?}");
}
