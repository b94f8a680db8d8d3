mod common;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use common::{toy_dir, toy_stub};
use sourcecap::compare::{read_report, render_table};
use sourcecap::manifest::Manifest;
use sourcecap_core::pipeline::summarize;
use sourcecap_core::{Mode, Pipeline, PipelineConfig, Sequential};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sourcecap"));
    for (key, _) in std::env::vars() {
        if key.starts_with("SOURCECAP_") {
            cmd.env_remove(key);
        }
    }
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy(file: &str) -> String {
    toy_dir().join(file).display().to_string()
}

#[test]
fn ingest_reports_document_count_and_records_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.toml");
    let m = manifest.display().to_string();
    let o = run(&["ingest", "--file", &toy("sciq.csv"), "--name", "sciq", "--profile", "science exam QA", "--manifest", &m]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("sciq: 8 documents"));
    let loaded = Manifest::load(&manifest).unwrap();
    assert_eq!(loaded.sources[0].name, "sciq");
    assert_eq!(loaded.build_registry(&["sciq".into()]).unwrap().get("sciq").unwrap().profile.document_count, 8);

    let again = run(&["ingest", "--file", &toy("sciq.csv"), "--name", "sciq", "--profile", "x", "--manifest", &m]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("duplicate source sciq"));
}

#[test]
fn ingest_argument_and_parse_errors() {
    let o = run(&["ingest", "--file", &toy("wiki.json"), "--profile", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"[{"text": "ok"}, {"id": 5}]"#).unwrap();
    let o = run(&["ingest", "--file", bad.to_str().unwrap(), "--name", "bad", "--profile", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("record 1"), "{}", stderr(&o));
}

#[test]
fn ask_trace_lines_match_the_pipeline_trace() {
    let o = run(&[
        "ask", "Which protein carries oxygen in red blood cells?", "--trace", "--mode", "adaptive",
        "--manifest", &toy("manifest.toml"), "--stub-script", &toy("stub.json"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("hemoglobin"));

    let manifest = Manifest::load(&toy_dir().join("manifest.toml")).unwrap();
    let names: Vec<String> = manifest.sources.iter().map(|s| s.name.clone()).collect();
    let registry = manifest.build_registry(&names).unwrap();
    let trace = Pipeline::new(&registry, &Sequential, PipelineConfig::default())
        .answer("Which protein carries oxygen in red blood cells?", &toy_stub())
        .unwrap();
    let expected = summarize(&trace);
    let printed: Vec<&str> = lines.take(expected.len()).collect();
    assert_eq!(printed, expected);
    assert!(out.contains("preferred=sciq capped[wiki=1 sciq=3 bioasq=1]"));
}

#[test]
fn ask_hard_mode_survives_a_routing_miss() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("s.json");
    std::fs::write(
        &script,
        r#"{"rules":[
            {"kind":"route","pattern":"","reply":"I cannot decide"},
            {"kind":"generate","pattern":"located in Paris","reply":"ANSWER: Paris\nSUFFICIENT: yes"}
        ]}"#,
    )
    .unwrap();
    let o = run(&[
        "ask", "Where is the Eiffel Tower located?", "--mode", "hard", "--decompose", "false", "--trace",
        "--manifest", &toy("manifest.toml"), "--stub-script", script.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("Paris"));
    assert!(out.contains("preferred=none"), "{out}");
}

#[test]
fn flags_override_environment_settings() {
    let base = [
        "ask", "Where is the Eiffel Tower located?", "--trace",
        "--manifest", &toy("manifest.toml"), "--stub-script", &toy("stub.json"),
    ];
    let o = bin().args(base).env("SOURCECAP_KEEP_K", "2").output().unwrap();
    assert!(stdout(&o).contains("evidence=2"), "{}", stdout(&o));
    let o = bin().args(base).args(["--keep-k", "4"]).env("SOURCECAP_KEEP_K", "2").output().unwrap();
    assert!(stdout(&o).contains("evidence=4"), "{}", stdout(&o));
    let o = bin().args(base).env("SOURCECAP_KEEP_K", "0").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("keep_k must be ≥ 1"));
}

fn compare(out: &Path, extra: &[&str]) -> Output {
    let (manifest, script) = (toy("manifest.toml"), toy("stub.json"));
    let mut args = vec![
        "compare", "--manifest", &manifest, "--stub-script", &script,
        "--preset", "three-source", "--out", out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn compare_prints_table_and_writes_consistent_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = compare(&dir.path().join("a"), &["--sample-size", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let report = read_report(&dir.path().join("a/report.json")).unwrap();
    let table = render_table(&report);
    assert!(out.starts_with(&table));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].split_whitespace().eq(["Method", "EM", "F1", "Avg", "Tokens"]));
    assert!(rows[1].starts_with("hard") && rows[2].starts_with("adaptive"));
    assert_eq!(report.arms.len(), 2);
    for arm in &report.arms {
        assert_eq!(arm.records.len(), 4);
    }
    for name in ["records.jsonl", "timings.json", "table.txt"] {
        assert!(dir.path().join("a").join(name).exists(), "{name}");
    }
}

#[test]
fn compare_samples_evenly_spaced_queries() {
    let dir = tempfile::tempdir().unwrap();
    let o = compare(&dir.path().join("s"), &["--sample-size", "3", "--no-baseline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_report(&dir.path().join("s/report.json")).unwrap();
    assert_eq!(report.query_ids, ["q0", "q3", "q6"]);
    assert_eq!(report.arms.len(), 1);
    assert_eq!(report.arms[0].config.mode, Mode::Adaptive);
    let ids: Vec<&str> = report.arms[0].records.iter().map(|r| r.query_id.as_str()).collect();
    assert_eq!(ids, ["q0", "q3", "q6"]);

    let o = compare(&dir.path().join("t"), &["--sample-size", "11"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("exceeds dataset size"));
}

#[test]
fn compare_arms_file_and_invalid_arm() {
    let dir = tempfile::tempdir().unwrap();
    let arms = dir.path().join("arms.json");
    std::fs::write(&arms, r#"[{"name":"rrf","budget":{"selector":"rrf"}},{"name":"broken","budget":{"keep_k":0}}]"#).unwrap();
    let o = compare(&dir.path().join("x"), &["--arms-file", arms.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("arm broken: keep_k must be ≥ 1"));

    std::fs::write(&arms, r#"[{"name":"rrf","budget":{"selector":"rrf"}},{"name":"judge","budget":{"selector":"judge"}}]"#).unwrap();
    let o = compare(&dir.path().join("y"), &["--arms-file", arms.to_str().unwrap(), "--sample-size", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("judge"));
}

#[test]
fn config_file_is_the_lowest_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        format!(
            "manifest = {:?}\nstub_script = {:?}\npreset = \"three-source\"\nsample_size = 2\n",
            toy("manifest.toml"),
            toy("stub.json")
        ),
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = run(&["compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_report(&out.join("report.json")).unwrap().query_ids, ["q0", "q5"]);
    let o = bin()
        .args(["compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("SOURCECAP_SAMPLE_SIZE", "5")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(read_report(&out.join("report.json")).unwrap().query_ids.len(), 5);
}

/// Starts `serve` on an ephemeral port and returns the child and its base URL.
fn spawn_serve(data: &Path) -> (std::process::Child, String) {
    let mut child = bin()
        .args([
            "serve", "--bind", "127.0.0.1:0", "--data-dir", data.to_str().unwrap(),
            "--manifest", &toy("manifest.toml"), "--stub-script", &toy("stub.json"),
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
    (child, base)
}

#[test]
fn serve_runs_jobs_and_shuts_down_on_interrupt() {
    let dir = tempfile::tempdir().unwrap();
    let (mut child, base) = spawn_serve(dir.path());
    let client = reqwest::blocking::Client::new();
    assert_eq!(client.get(format!("{base}/runs/unknown")).send().unwrap().status(), 404);

    let resp = client
        .post(format!("{base}/runs"))
        .json(&serde_json::json!({"preset": "two-source", "sample_size": 2, "arms": [{"name": "adaptive"}]}))
        .send()
        .unwrap();
    assert_eq!(resp.status(), 202);
    let id = resp.json::<serde_json::Value>().unwrap()["id"].as_str().unwrap().to_string();
    let started = std::time::Instant::now();
    loop {
        let body: serde_json::Value = client.get(format!("{base}/runs/{id}")).send().unwrap().json().unwrap();
        if body["state"] == "done" {
            assert_eq!(body["report"]["sources"], serde_json::json!(["wiki", "bioasq"]));
            break;
        }
        assert_ne!(body["state"], "failed", "{body}");
        assert!(started.elapsed() < Duration::from_secs(30));
        std::thread::sleep(Duration::from_millis(20));
    }

    let kill = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(kill.success());
    let status = child.wait().unwrap();
    assert!(status.success(), "serve exited with {status}");
}

#[test]
fn serve_fails_on_an_occupied_port() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["serve", "--bind", &addr, "--data-dir", dir.path().to_str().unwrap(), "--stub-script", &toy("stub.json")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(&format!("cannot bind {addr}")), "{}", stderr(&o));
}
