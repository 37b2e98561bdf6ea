use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use tdeval::oracle::ScenePair;
use tdeval::record::{read_dataset, read_lines};

fn tdeval() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tdeval"));
    for k in ["BASE_URL", "MODEL", "API_KEY", "TDEVAL_CONFIG", "ANNOTATOR_TOKEN"] {
        c.env_remove(k);
    }
    c
}

fn run(args: &[&str]) -> Output {
    let out = tdeval().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts the offline judge on a free port and returns its base URL.
fn oracle_serve() -> (Server, String) {
    let mut child = tdeval().args(["oracle-serve", "--port", "0"]).stdout(Stdio::piped()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("oracle endpoint on ").expect(&line).to_string();
    (Server(child), url)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synthetic_benchmark_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["oracle-scenes", "--out", p(d), "--count", "12", "--seed", "4"]);
    let (_server, url) = oracle_serve();

    let (pairs, records) = (d.join("pairs.jsonl"), d.join("records.jsonl"));
    let eval = ["evaluate", "--pairs", p(&pairs), "--out", p(&records), "--base-url", &url, "--model", "oracle"];
    let out = run(&eval);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok 12 "));
    let again = run(&eval);
    assert!(String::from_utf8_lossy(&again.stdout).contains("resumed 12"));

    let scenes: Vec<ScenePair> = read_lines(&std::fs::read_to_string(d.join("scenes.jsonl")).unwrap()).unwrap();
    let got = read_dataset(&std::fs::read_to_string(&records).unwrap()).unwrap();
    assert_eq!(got.len(), 12);
    for (r, s) in got.iter().zip(&scenes) {
        assert_eq!(r.id, s.id);
        assert_eq!(r.overall_score(), Some(s.ground_truth));
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("records.jsonl.report.json")).unwrap()).unwrap();
    assert_eq!(report["resumed"], 12);

    let samples = d.join("samples.jsonl");
    run(&["expand", "--records", p(&records), "--out", p(&samples)]);
    let exports: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let e = d.join(format!("export{i}.jsonl"));
            let b = d.join(format!("balanced{i}.jsonl"));
            run(&["rebalance", "--samples", p(&samples), "--out", p(&b), "--seed", "9", "--export", p(&e)]);
            std::fs::read(e).unwrap()
        })
        .collect();
    assert!(!exports[0].is_empty());
    assert_eq!(exports[0], exports[1]);

    let stats = run(&["stats", p(&records), "--json"]);
    let stats: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(stats["pairs"], 12);

    let table = run(&["metaeval", "--model", p(&records), "--annotator", p(&records), "--json"]);
    let table: serde_json::Value = serde_json::from_slice(&table.stdout).unwrap();
    assert_eq!(table["model"]["manual_avg"]["spearman"], 1.0);
}

#[test]
fn missing_input_exits_one_with_json() {
    let out = tdeval().args(["expand", "--records", "/nonexistent/records.jsonl", "--out", "/tmp/x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["command"], "expand");
}

#[test]
fn config_file_supplies_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["oracle-scenes", "--out", p(d), "--count", "3", "--seed", "1"]);
    let (_server, url) = oracle_serve();
    let cfg = d.join("tdeval.toml");
    std::fs::write(&cfg, format!("parallelism = 2\n[endpoint]\nbase_url = \"{url}\"\nmodel_name = \"oracle\"\n[pipeline]\nvariant = \"no_captioning\"\n")).unwrap();
    let out = tdeval()
        .args(["evaluate", "--pairs", p(&d.join("pairs.jsonl")), "--out", p(&d.join("r.jsonl"))])
        .env("TDEVAL_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let got = read_dataset(&std::fs::read_to_string(d.join("r.jsonl")).unwrap()).unwrap();
    assert!(got.iter().all(|r| r.provenance.variant == tdeval::record::Variant::NoCaptioning && r.captions.is_empty()));

    let bad = d.join("bad.toml");
    std::fs::write(&bad, "paralelism = 2\n").unwrap();
    let out = tdeval().args(["--config", p(&bad), "stats", p(&d.join("pairs.jsonl"))]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
