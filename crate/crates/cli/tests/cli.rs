use std::process::Command;

fn icl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_icl"))
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tiny");
    let cfg = dir.path().join("tiny.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{
                "name": "tiny", "d": 2, "n": 32, "N": 200,
                "sweep": {{"axis": "m", "start": 8, "points": 5}},
                "train": {{"tasks": {{"family": "rotated_diagonal", "a": 1.0, "b": 2.0}}}},
                "tests": [{{"label": "wide", "tasks": {{"family": "rotated_diagonal", "a": 0.5, "b": 3.0}}}}],
                "init": {{"kind": "near_identity", "noise": 0.05}},
                "seeds": [3, 4], "episodes": 40, "task_samples": 100,
                "training": {{"max_iterations": 200}},
                "output": {:?}
            }}"#,
            out
        ),
    )
    .unwrap();
    let status = icl().arg("run").arg(&cfg).env("ICL_THREADS", "2").output().unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let stdout = String::from_utf8(status.stdout).unwrap();
    assert!(stdout.contains("in_domain: slope") && stdout.contains("wide: slope"));

    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("experiment,axis,value,seed,raw_error,floor,shifted_error")
    );
    assert_eq!(lines.count(), 2 * 5 * 2);
    for name in ["config.json", "plot.svg", "theta_seed3.json", "theta_seed4.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["sweep"]["grid"], serde_json::json!([8, 16, 32, 64, 128]));
}

#[test]
fn diversity_reports_a_witness_for_a_diagonal_family() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("div.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{
                "name": "diag", "d": 3,
                "train": {{"family": "rotated_diagonal", "a": 1.0, "b": 2.0, "rotation": {{"fixed": {{"seed": 4}}}}}},
                "test": {{"family": "rotated_diagonal", "a": 1.0, "b": 2.0}},
                "task_samples": 200,
                "output": {:?}
            }}"#,
            dir.path()
        ),
    )
    .unwrap();
    let status = icl().arg("diversity").arg(&cfg).output().unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("diversity.json")).unwrap()).unwrap();
    assert_eq!(report["verdict"], "not_diverse");
    assert!(report["evidence"]["witness"].is_object());
    assert!(report["distance_surrogate"].as_f64().unwrap() >= 0.0);
}

#[test]
fn bad_config_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"name": "bad", "sweep": {"axis": "m", "grid": [4, 2]}}"#).unwrap();
    let status = icl().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).starts_with("error:"));
}
