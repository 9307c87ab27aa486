//! End-to-end tests over the built binary: exit codes, state
//! persistence across invocations, and scenario execution.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn laneloop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laneloop"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_intake(dir: &Path) {
    fs::create_dir_all(dir.join("state/intake")).unwrap();
    fs::write(
        dir.join("state/intake/backlog.md"),
        "- BL-001 :: Expire stale sessions :: Enforce idle expiry at the gateway :: docs/BL-001.md#L9 :: session-mgmt :: 2 :: platform :: AUTO-SEC\n",
    )
    .unwrap();
}

#[test]
fn full_loop_persists_state_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    write_intake(dir.path());
    let start = ["--virtual-start", "2026-03-02T06:00:00Z"];
    for (lane, extra) in [("1", &start[..]), ("3", &[]), ("4", &[]), ("6", &[])] {
        let out = laneloop(dir.path(), &[&["run-lane", lane][..], extra].concat());
        assert!(out.status.success(), "lane {lane}: {}", stderr(&out));
    }
    let report = laneloop(dir.path(), &["report"]);
    assert!(report.status.success());
    let text = stdout(&report);
    assert!(text.contains("runs in window: 4 (clean 4, degraded 0, failed 0)"));
    assert!(text.contains("evidence chain: valid (4 records)"));

    let validate = laneloop(dir.path(), &["validate-chain"]);
    assert!(validate.status.success());
    assert!(stdout(&validate).contains("chain valid: 4 record(s)"));

    // The tracker checkpoint carries the closed ticket.
    let tracker = fs::read_to_string(dir.path().join("state/tracker_state.json")).unwrap();
    assert!(tracker.contains("\"status\": \"Done\""));
}

#[test]
fn unknown_lane_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = laneloop(dir.path(), &["run-lane", "9"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("no lane 9"));
}

#[test]
fn bad_lane_config_fails_before_any_tracker_call() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("lanes.json"), "{ nope").unwrap();
    let out = laneloop(dir.path(), &["run-lane", "1", "--config", "lanes.json"]);
    assert_eq!(out.status.code(), Some(3));
    // No state was touched: the tracker checkpoint never appeared.
    assert!(!dir.path().join("state/tracker_state.json").exists());
}

#[test]
fn tampered_chain_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    write_intake(dir.path());
    let out = laneloop(
        dir.path(),
        &["run-lane", "1", "--virtual-start", "2026-03-02T06:00:00Z"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let chain_path = dir.path().join("state/evidence/chain.jsonl");
    let tampered = fs::read_to_string(&chain_path)
        .unwrap()
        .replace("\"exception_count\":0", "\"exception_count\":7");
    fs::write(&chain_path, tampered).unwrap();
    let validate = laneloop(dir.path(), &["validate-chain"]);
    assert_eq!(validate.status.code(), Some(4));
    assert!(stderr(&validate).contains("broken at record 0"));
}

#[test]
fn scenario_pass_and_fail_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = r#"{
        "name": "cli-drill",
        "virtual_start": "2026-03-02T06:00:00Z",
        "intake_documents": [{
            "name": "backlog.md",
            "lines": ["- BL-001 :: Tighten CSP header :: Add frame-ancestors directive :: docs/BL-001.md#L3 :: csp :: 2 :: platform :: AUTO-SEC"]
        }],
        "steps": [
            { "action": "run_lane", "lane": 1 },
            { "action": "run_lane", "lane": 3 },
            { "action": "run_lane", "lane": 4 },
            { "action": "run_lane", "lane": 6 }
        ],
        "assertions": [
            { "kind": "ticket_status", "key": "KAN-1", "status": "Done" },
            { "kind": "chain_valid" }
        ]
    }"#;
    fs::write(dir.path().join("drill.json"), scenario).unwrap();
    let out = laneloop(dir.path(), &["simulate", "drill.json", "--state-dir", "sim-a"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("result: PASS (2 checks, 0 failed)"));

    let failing = scenario.replace("\"Done\"", "\"OnHold\"");
    fs::write(dir.path().join("failing.json"), failing).unwrap();
    let out = laneloop(
        dir.path(),
        &["simulate", "failing.json", "--state-dir", "sim-b"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("FAIL"));

    let malformed = dir.path().join("broken.json");
    fs::write(&malformed, "{ definitely not json").unwrap();
    let out = laneloop(dir.path(), &["simulate", "broken.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("line"));
}

#[test]
fn simulate_is_deterministic_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = r#"{
        "name": "determinism",
        "seed": 42,
        "virtual_start": "2026-03-02T06:00:00Z",
        "alert_injection_rate": 0.5,
        "intake_documents": [{
            "name": "backlog.md",
            "lines": [
                "- BL-001 :: Rotate signing keys :: Rotate the artifact signing keys :: docs/BL-001.md#L1 :: key-rotation :: 3 :: platform :: AUTO-SEC",
                "- BL-002 :: Pin container digests :: Pin base image digests in CI :: docs/BL-002.md#L1 :: supply-chain :: 2 :: platform :: AUTO-SEC"
            ]
        }],
        "steps": [
            { "action": "run_lane", "lane": 1 },
            { "action": "run_lane", "lane": 3 },
            { "action": "run_lane", "lane": 4 },
            { "action": "run_lane", "lane": 6 },
            { "action": "run_lane", "lane": 2 },
            { "action": "run_lane", "lane": 5 },
            { "action": "run_lane", "lane": 7 }
        ],
        "assertions": [{ "kind": "chain_valid" }]
    }"#;
    fs::write(dir.path().join("det.json"), scenario).unwrap();
    for sub in ["a", "b"] {
        let out = laneloop(dir.path(), &["simulate", "det.json", "--state-dir", sub]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for file in ["backlog/items.jsonl", "evidence/chain.jsonl"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} must be byte-identical across runs");
    }
}

#[test]
fn outage_run_lane_queues_then_drain_recovers() {
    let dir = tempfile::tempdir().unwrap();
    write_intake(dir.path());
    fs::write(
        dir.path().join("outage.json"),
        r#"{
            "outage_windows": [{
                "start": "2026-03-02T00:00:00Z",
                "end": "2026-03-02T12:00:00Z"
            }],
            "rate_limit_after": null,
            "latency": { "min_ms": 0, "max_ms": 0 },
            "rng_seed": 0
        }"#,
    )
    .unwrap();
    let out = laneloop(
        dir.path(),
        &[
            "run-lane",
            "1",
            "--virtual-start",
            "2026-03-02T06:00:00Z",
            "--fault-profile",
            "outage.json",
        ],
    );
    // DEGRADED still exits 0: the cycle completed, intents queued.
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("Degraded"));

    // Next invocation leaves the outage behind; the drain replays the
    // queued create.
    let out = laneloop(
        dir.path(),
        &["drain", "--virtual-start", "2026-03-02T13:00:00Z"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let tracker = fs::read_to_string(dir.path().join("state/tracker_state.json")).unwrap();
    assert!(tracker.contains("Expire stale sessions"));
}

#[test]
fn init_fixture_seeds_a_fresh_state_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = laneloop(dir.path(), &["init-fixture", "--tickets", "4"]);
    assert!(out.status.success());
    let fixture: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("tracker_fixture.json")).unwrap())
            .unwrap();
    assert_eq!(fixture.as_array().unwrap().len(), 4);

    // Seed a state dir from it: the audit lane sees all four tickets.
    let out = laneloop(
        dir.path(),
        &[
            "run-lane",
            "2",
            "--tracker-fixture",
            "tracker_fixture.json",
            "--virtual-start",
            "2026-03-02T06:00:00Z",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("audit: 4 tickets"));
}
