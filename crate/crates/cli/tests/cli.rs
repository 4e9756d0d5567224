use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const NET: &str = r#"{"nodes":4,"links":[[0,1,"a"],[1,2,"b"],[2,3,"c"],[0,2,"d"],[1,3,"e"]]}"#;

fn srsched(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srsched"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("net.json"), NET).unwrap();
    ok(&srsched(
        dir.path(),
        &[
            "adversary",
            "--kind",
            "random",
            "--net",
            "net.json",
            "--r",
            "0.5",
            "--w",
            "20",
            "--horizon",
            "200",
            "--seed",
            "3",
            "--out",
            "tr.jsonl",
        ],
    ));
    dir
}

#[test]
fn random_adversary_is_weakly_admissible() {
    let dir = setup();
    let out = ok(&srsched(
        dir.path(),
        &[
            "admissibility",
            "--trace",
            "tr.jsonl",
            "--w",
            "20",
            "--r",
            "0.5",
            "--weak",
        ],
    ));
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["admissible"], true);
}

#[test]
fn route_then_schedule() {
    let dir = setup();
    ok(&srsched(
        dir.path(),
        &[
            "route",
            "--net",
            "net.json",
            "--trace",
            "tr.jsonl",
            "--r",
            "0.5",
            "--R",
            "0.75",
            "--w",
            "20",
            "--variant",
            "batched",
            "--out",
            "routed.jsonl",
            "--diagnostics",
            "diag.csv",
        ],
    ));
    let routed = fs::read_to_string(dir.path().join("routed.jsonl")).unwrap();
    let original = fs::read_to_string(dir.path().join("tr.jsonl")).unwrap();
    assert_eq!(routed.lines().count(), original.lines().count());
    assert!(routed.lines().all(|l| l.contains("\"path\"")));
    let diag = fs::read_to_string(dir.path().join("diag.csv")).unwrap();
    assert!(diag.starts_with("phase,window,d,max_load"));
    assert!(diag.lines().count() > 1);

    let delays = ok(&srsched(
        dir.path(),
        &[
            "schedule",
            "--net",
            "net.json",
            "--trace",
            "routed.jsonl",
            "--epsilon",
            "0.5",
            "--mode",
            "derand",
            "--T",
            "20",
            "--M",
            "200",
            "--certificate",
            "cert.json",
        ],
    ));
    assert!(delays.starts_with("packet,inject,deliver,delay"));
    assert_eq!(delays.lines().count(), original.lines().count() + 1);
    let cert: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cert.json")).unwrap()).unwrap();
    assert_eq!(cert["injected"], cert["delivered"]);
    assert!(cert["deadline"]["intervals"]
        .as_array()
        .is_some_and(|a| !a.is_empty()));
}

#[test]
fn schedule_rejects_lone_spacing() {
    let dir = setup();
    let out = srsched(
        dir.path(),
        &[
            "schedule",
            "--net",
            "net.json",
            "--trace",
            "tr.jsonl",
            "--epsilon",
            "0.5",
            "--mode",
            "random",
            "--T",
            "20",
        ],
    );
    assert!(!out.status.success());
}

#[test]
fn instability_traces_are_written() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["fifo-g", "ntg-g"] {
        let file = format!("{kind}.jsonl");
        ok(&srsched(
            dir.path(),
            &[
                "adversary",
                "--kind",
                kind,
                "--r",
                "0.95",
                "--s0",
                "50",
                "--phases",
                "2",
                "--out",
                &file,
            ],
        ));
        let text = fs::read_to_string(dir.path().join(&file)).unwrap();
        assert!(text.lines().count() > 50);
    }
}

#[test]
fn ring_modes_respect_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let mut trace = String::new();
    for i in 0..400u64 {
        let src = (i * 5) % 8;
        let dst = (src + 1 + i % 7) % 8;
        trace.push_str(&format!("{{\"t\":{},\"src\":{src},\"dst\":{dst}}}\n", i));
    }
    fs::write(dir.path().join("ring.jsonl"), trace).unwrap();
    for mode in ["random", "offline", "online"] {
        let csv = ok(&srsched(
            dir.path(),
            &[
                "ring",
                "--n",
                "8",
                "--c",
                "3",
                "--r",
                "0.75",
                "--beta",
                "0.9",
                "--mode",
                mode,
                "--trace",
                "ring.jsonl",
                "--loads",
                "loads.csv",
            ],
        ));
        assert_eq!(csv.lines().count(), 401);
        let loads = fs::read_to_string(dir.path().join("loads.csv")).unwrap();
        assert!(loads.starts_with("interval,max_load,load_bound"));
        if mode != "random" {
            for line in loads.lines().skip(1) {
                let f: Vec<u64> = line.split(',').map(|x| x.parse().unwrap()).collect();
                assert!(f[1] <= f[2], "{mode}: {line}");
            }
        }
    }
}

fn write_config(dir: &Path, extra: &str) {
    let config = format!(
        r#"{{"network": {{"kind": "g"}},
            "trace": {{"kind": "fifo_g", "r": 0.95, "s0": 300, "phases": 3}},
            "router": {{"kind": "source", "r": 0.95, "target_rate": 0.99, "w": 100000, "variant": "batched"}},
            "scheduler": {{"kind": "greedy", "rule": "fifo"}},
            "outputs": {{"report": "report.json", "queue_series": "queue.csv", "deliveries": "delays.csv"}}
            {extra}}}"#
    );
    fs::write(dir.join("sim.json"), config).unwrap();
}

#[test]
fn simulate_writes_reports_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "");
    let first = ok(&srsched(dir.path(), &["simulate", "--config", "sim.json"]));
    let report_a = fs::read(dir.path().join("report.json")).unwrap();
    let queue_a = fs::read(dir.path().join("queue.csv")).unwrap();
    let second = ok(&srsched(dir.path(), &["simulate", "--config", "sim.json"]));
    assert_eq!(first, second);
    assert_eq!(report_a, fs::read(dir.path().join("report.json")).unwrap());
    assert_eq!(queue_a, fs::read(dir.path().join("queue.csv")).unwrap());
    let summary: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(summary["status"], "completed");
    assert!(fs::read_to_string(dir.path().join("delays.csv"))
        .unwrap()
        .starts_with("packet,inject,deliver,delay"));
}

#[test]
fn simulate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), r#", "queue_cap": 400"#);
    let out = srsched(dir.path(), &["simulate", "--config", "sim.json"]);
    assert_eq!(out.status.code(), Some(3));

    write_config(dir.path(), r#", "bogus": 1"#);
    let out = srsched(dir.path(), &["simulate", "--config", "sim.json"]);
    assert_eq!(out.status.code(), Some(1));

    write_config(dir.path(), "");
    let out = srsched(
        dir.path(),
        &["simulate", "--config", "sim.json", "--sched", "edf"],
    );
    assert_eq!(out.status.code(), Some(1));
    let out = srsched(
        dir.path(),
        &["simulate", "--config", "sim.json", "--sched", "lis"],
    );
    ok(&out);
}

#[test]
fn concrete_inband_with_short_window_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("net.json"), NET).unwrap();
    let config = r#"{"network": {"kind": "file", "path": "net.json"},
        "trace": {"kind": "random", "w": 20, "r": 0.5, "horizon": 100},
        "router": {"kind": "source", "r": 0.5, "target_rate": 0.75, "w": 20, "variant": "inband", "concrete_inband": true},
        "scheduler": {"kind": "greedy", "rule": "fifo"}}"#;
    fs::write(dir.path().join("sim.json"), config).unwrap();
    let out = srsched(dir.path(), &["simulate", "--config", "sim.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("2 tau"));
}
