use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn pathwarden(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathwarden"))
        .args(args)
        .env_remove("PATHWARDEN_CONFIG")
        .env_remove("PATHWARDEN_THETA_STEER")
        .env_remove("PATHWARDEN_THETA_BLOCK")
        .env_remove("PATHWARDEN_BUDGET_B")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

#[test]
fn all_scenarios_pass() {
    let out = pathwarden(&["scenario", "all", "--seed", "3", "--runs", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("PASS")).count(), 6);
}

#[test]
fn scenario_json_reports_flipped_decision_without_guarding_policy() {
    let out = pathwarden(&["scenario", "information-barrier", "--remove-policy", "information-barrier", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["passed"], true);
    let detail = v["expectations"][0]["detail"].as_str().unwrap();
    assert!(!detail.contains("Block"), "{detail}");
}

#[test]
fn thresholds_come_from_flags_and_env() {
    let out = pathwarden(&["scenario", "exfiltration-chain", "--theta-block", "0.7", "--json"]);
    assert!(json(&out)["expectations"][0]["detail"].as_str().unwrap().starts_with("send Block"));

    let out = Command::new(env!("CARGO_BIN_EXE_pathwarden"))
        .args(["scenario", "exfiltration-chain", "--json"])
        .env("PATHWARDEN_THETA_STEER", "0.8")
        .output()
        .unwrap();
    assert!(json(&out)["expectations"][0]["detail"].as_str().unwrap().starts_with("send Pass"));
}

#[test]
fn invalid_configuration_exits_with_usage_error() {
    let out = pathwarden(&["scenario", "exfiltration-chain", "--theta-steer", "0.95", "--theta-block", "0.9"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pathwarden(&["scenario", "no-such-scenario"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fleet_json_and_out_file_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out_file = dir.path().join("fleet.json");
    let out = pathwarden(&[
        "fleet", "--agents", "5", "--tasks", "25", "--seed", "9", "--json", "--out", out_file.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let file: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out_file).unwrap()).unwrap();
    assert_eq!(v, file);
    assert_eq!(v["sums_consistent"], true);
    assert_eq!(v["replay_mismatches"], 0);
    assert!(!v["metrics"]["runs"].as_array().unwrap().is_empty());
}

#[test]
fn sweep_over_grid_file() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.json");
    std::fs::write(
        &grid,
        r#"[{"theta_steer":0.5,"theta_block":0.8,"empty_policy_set":false},
            {"theta_steer":0.5,"theta_block":0.95,"empty_policy_set":false},
            {"theta_steer":0.5,"theta_block":0.9,"empty_policy_set":true}]"#,
    )
    .unwrap();
    let out = pathwarden(&["sweep", "--grid", grid.to_str().unwrap(), "--agents", "5", "--tasks", "25", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let v = json(&out);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(v["monotonicity_violations"].as_array().unwrap().len(), 0);
    let empty = &rows[2];
    assert_eq!(empty["empty_policy_set"], true);
    assert_eq!(empty["sum_v_t"], 0.0);
}

fn scenario_trail(dir: &Path) {
    let out = pathwarden(&["scenario", "exfiltration-chain", "--seed", "4", "--trail-dir", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.join("trail.jsonl").is_file());
    assert!(dir.join("policy-set.json").is_file());
}

#[test]
fn audit_verify_replay_and_export() {
    let dir = tempfile::tempdir().unwrap();
    scenario_trail(dir.path());
    let d = dir.path().to_str().unwrap();

    let out = pathwarden(&["audit", "verify", d]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).starts_with("chain ok"));

    let out = pathwarden(&["audit", "replay", d, "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let entries = json(&out);
    assert!(!entries.as_array().unwrap().is_empty());
    assert!(entries.as_array().unwrap().iter().all(|e| e["verdict"] == "match"), "{entries}");

    let out = pathwarden(&["audit", "export", d]);
    assert_eq!(out.status.code(), Some(0));
    let lines: Vec<serde_json::Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let raw = std::fs::read_to_string(dir.path().join("trail.jsonl")).unwrap();
    assert_eq!(lines.len(), raw.lines().count());
    assert!(raw.contains("\"content\":{"));
    assert!(lines.iter().all(|l| l.get("content").is_none_or(|c| c.is_null())));
}

#[test]
fn tampered_trail_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    scenario_trail(dir.path());
    let path = dir.path().join("trail.jsonl");
    let raw = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = raw.lines().map(str::to_string).collect();
    lines[2] = lines[2].replacen("\"v_i\":0", "\"v_i\":1", 1);
    assert_ne!(lines[2], raw.lines().nth(2).unwrap());
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let out = pathwarden(&["audit", "verify", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("corrupt"));
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nhost: localhost\r\nconnection: close\r\n\r\n").ok()?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).ok()?;
    Some(buf)
}

#[test]
fn serve_answers_health() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_pathwarden"))
        .args(["serve", "--demo-tools", "--tokens", "t=agent-runtime", "--listen"])
        .arg(format!("127.0.0.1:{port}"))
        .arg("--trail-dir")
        .arg(dir.path())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let mut health = None;
    while Instant::now() < deadline {
        if let Some(r) = http_get(port, "/v1/health") {
            health = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    let unauthorized = http_get(port, "/v1/fleet");
    child.kill().unwrap();
    child.wait().unwrap();
    let health = health.expect("server came up");
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");
    assert!(unauthorized.unwrap().starts_with("HTTP/1.1 401"));
    assert!(dir.path().join("policy-set.json").is_file());
}

#[test]
fn serve_requires_a_tool_registry() {
    let out = pathwarden(&["serve", "--tokens", "t=agent-runtime", "--listen", "127.0.0.1:0"]);
    assert_eq!(out.status.code(), Some(2));
}
