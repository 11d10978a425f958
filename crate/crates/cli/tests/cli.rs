use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use tungstenite::Message;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_traction-sim"));
    c.env("RUST_LOG", "warn");
    c
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn traction_reference_reaches_done_and_repeats_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = scenarios().join("traction.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["traction", "--scenario", s(&scenario), "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["trace.csv", "phases.csv", "events.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["outcome"], "done");
    assert_eq!(summary["cuts"], 4);
    let phases = fs::read_to_string(a.join("phases.csv")).unwrap();
    assert!(phases.contains("operator_check"));
    assert!(phases.lines().last().unwrap().contains(",done,"));
}

#[test]
fn seed_flag_changes_noisy_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = scenarios().join("traction.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&["traction", "--scenario", s(&scenario), "--out", s(&a), "--seed", "1"]);
    run(&["traction", "--scenario", s(&scenario), "--out", s(&b), "--seed", "2"]);
    assert_ne!(fs::read(a.join("trace.csv")).unwrap(), fs::read(b.join("trace.csv")).unwrap());
}

#[test]
fn abort_script_exits_nonzero_with_trace_flushed() {
    let tmp = tempfile::tempdir().unwrap();
    let script = tmp.path().join("abort.jsonl");
    fs::write(&script, "{\"t_offset_s\": 3.0, \"command\": \"abort\"}\n").unwrap();
    let out = tmp.path().join("out");
    let o = run(&["traction", "--script", s(&script), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("failed:aborted"));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.lines().count() > 80);
    assert!(trace.lines().last().unwrap().contains("failed:aborted"));
}

#[test]
fn traction_without_script_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["traction", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("script"));
}

#[test]
fn unknown_scenario_key_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[tissue]\nkt = 0.1\nstiffness = 2\n").unwrap();
    let o = run(&["track-grasp", "--scenario", s(&path), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("tissue.stiffness"), "{err}");
}

#[test]
fn grasp_grid_writes_report_and_analyze_reproduces_it() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = scenarios().join("tracking.toml");
    let out = tmp.path().join("grid");
    let o = run(&["track-grasp", "--scenario", s(&scenario), "--out", s(&out), "--repeat", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let traces = fs::read_dir(out.join("traces")).unwrap().count();
    assert_eq!(traces, 18);
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    // 9 cells x 4 pairs x 3 statistics, plus header
    assert_eq!(report.lines().count(), 9 * 12 + 1);

    let o = run(&["analyze", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let again = fs::read_to_string(out.join("report.csv")).unwrap();
    let values = |text: &str| -> Vec<f64> {
        text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect()
    };
    for (x, y) in values(&report).iter().zip(values(&again)) {
        // traces hold 6 significant digits
        assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
    }
}

#[test]
fn serve_accepts_a_client_and_exits_with_outcome() {
    let tmp = tempfile::tempdir().unwrap();
    let mut child =
        bin().args(["serve", "--port", "0", "--out", s(tmp.path())]).stdout(Stdio::piped()).spawn().unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let line = lines.next().unwrap().unwrap();
    let url = line.strip_prefix("listening on ").unwrap().to_string();

    let (mut ws, _) = tungstenite::connect(url).unwrap();
    let hello: serde_json::Value = match ws.read().unwrap() {
        Message::Text(t) => serde_json::from_str(&t).unwrap(),
        other => panic!("{other:?}"),
    };
    assert_eq!(hello["type"], "hello");
    ws.send(Message::text(r#"{"type":"command","seq":1,"payload":{"command":"abort"}}"#)).unwrap();

    let deadline = Instant::now() + Duration::from_secs(10);
    let mut acked = false;
    while Instant::now() < deadline {
        match ws.read() {
            Ok(Message::Text(t)) => {
                let v: serde_json::Value = serde_json::from_str(&t).unwrap();
                if v["type"] == "command_ack" {
                    assert_eq!(v["payload"]["accepted"], true);
                    acked = true;
                }
            }
            Ok(_) => {}
            Err(_) => break,
        }
    }
    assert!(acked);
    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(1));
    assert!(tmp.path().join("trace.csv").exists());
}
