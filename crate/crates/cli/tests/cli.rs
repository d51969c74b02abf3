use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tiertest"));
    for (k, _) in std::env::vars() {
        if k.starts_with("TIERTEST_") {
            cmd.env_remove(k);
        }
    }
    cmd
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn model() -> PathBuf {
    scenarios().join("models/webshop.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tiertest")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn report_without_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "no reports");
}

#[test]
fn fault_then_regress_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let model = model();
    let model = model.to_str().unwrap();

    let o = run(&["fault", "--model", model, "--out", out, "--id", "F_LINK", "--on"]);
    assert!(o.status.success(), "{o:?}");

    let o = run(&["regress", "--model", model, "--out", out, "--seed", "7"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(text.starts_with("report run-001 (regression)"), "{text}");
    assert!(text.contains("link_failure @ home_page"), "{text}");
    assert!(dir.path().join("run-001/report.json").exists());

    // Run ids keep counting and the stored case survives between invocations.
    let o = run(&["regress", "--model", model, "--out", out, "--seed", "7"]);
    let text = stdout(&o);
    assert!(text.starts_with("report run-002"), "{text}");
    assert!(text.contains("ingested link_failure @ home_page: Discarded"), "{text}");

    let o = run(&["report", "--out", out]);
    assert!(stdout(&o).starts_with("report run-002"));
    let o = run(&["report", "--out", out, "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["run_id"], "run-002");
}

#[test]
fn unknown_fault_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = model();
    let o = run(&[
        "fault",
        "--model",
        model.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--id",
        "F_NOPE",
        "--on",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown fault"));
}

#[test]
fn stress_reports_reliability() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let model = model();
    let model = model.to_str().unwrap();
    assert!(
        run(&["fault", "--model", model, "--out", out, "--id", "F_STRESS", "--on"])
            .status
            .success()
    );
    let o = run(&[
        "stress",
        "--model",
        model,
        "--out",
        out,
        "--volume",
        "30",
        "--intervals",
        "3",
    ]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(
        text.contains("reliability: 3 intervals, defects per interval [2, 2, 2]"),
        "{text}"
    );
}

#[test]
fn busy_clients_need_mobile_agents() {
    let dir = tempfile::tempdir().unwrap();
    let model = model();
    let o = run(&[
        "regress",
        "--model",
        model.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--busy",
        "c1",
    ]);
    assert!(o.status.success(), "{o:?}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run-001/report.json")).unwrap()).unwrap();
    assert_eq!(report["dispatched_muas"].as_array().map(Vec::len), Some(1), "{report}");
}

#[test]
fn scenario_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenarios().join("case1_link_failure.json");
    let out = dir.path().join("ok");
    let o = run(&[
        "run",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains(": pass"));
    assert!(out.join("trace.jsonl").exists());
    assert!(out.join("state.json").exists());

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": "m.json", "steps": []}"#).unwrap();
    let o = run(&[
        "run",
        "--scenario",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    // Same scenario with an expectation that cannot hold.
    let text = std::fs::read_to_string(&scenario).unwrap();
    let mut script: serde_json::Value = serde_json::from_str(&text).unwrap();
    script["model"] = serde_json::Value::String(model().to_str().unwrap().to_owned());
    let steps = script["steps"].as_array_mut().unwrap();
    let last = steps.last().unwrap()["tick"].as_u64().unwrap();
    steps.push(serde_json::json!({"tick": last + 1, "action": "assert_report", "defect_count": 99}));
    let failing = dir.path().join("failing.json");
    std::fs::write(&failing, script.to_string()).unwrap();
    let o = run(&[
        "run",
        "--scenario",
        failing.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{o:?}");
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn tcp_regression_against_served_agents() {
    let model = model();
    let mut server = bin()
        .args([
            "serve",
            "--model",
            model.to_str().unwrap(),
            "--addr",
            "127.0.0.1:0",
            "--duration-ms",
            "20000",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("serving on ")
        .expect("address line")
        .to_owned();

    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "regress",
        "--mode",
        "tcp",
        "--addr",
        &addr,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let _ = server.kill();
    let _ = server.wait();
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(text.starts_with("report run-001 (regression)"), "{text}");
    assert!(text.contains("CCA-1:") && text.contains("CCA-3:"), "{text}");
    assert!(dir.path().join("run-001/report.json").exists());
}
