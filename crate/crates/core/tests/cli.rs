use std::io::Write;
use std::process::{Command, Output, Stdio};

fn qdb(dir: &std::path::Path, args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_qdb"))
        .arg("--data")
        .arg(dir)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn enqueue_dequeue_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = qdb(dir.path(), &["queue", "create", "jobs", "--priority"], "");
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("created queue jobs"));
    assert!(qdb(dir.path(), &["enqueue", "jobs", "--priority", "2", "--text", "low"], "").status.success());
    assert!(qdb(dir.path(), &["enqueue", "jobs", "--priority", "8", "--text", "high"], "").status.success());

    let o = qdb(dir.path(), &["--json", "dequeue", "jobs"], "");
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["priority"], 8);
    let o = qdb(dir.path(), &["dequeue", "jobs"], "");
    assert!(stdout(&o).contains(&format!("payload={}", hex::encode("low"))), "{}", stdout(&o));
    assert_eq!(stdout(&qdb(dir.path(), &["dequeue", "jobs"], "")).trim(), "(empty)");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(qdb(dir.path(), &["dequeue", "missing"], "").status.code(), Some(1));
    assert_eq!(qdb(dir.path(), &["bogus"], "").status.code(), Some(2));
    assert_eq!(qdb(dir.path(), &["enqueue", "q", "--data-hex", "xyz"], "").status.code(), Some(2));
    assert_eq!(qdb(dir.path(), &["queue", "list"], "").status.code(), Some(0));
}

#[test]
fn txn_session_from_stdin() {
    let dir = tempfile::tempdir().unwrap();
    qdb(dir.path(), &["queue", "create", "a"], "");
    let script = "# one committed, one left open\nbegin\nenqueue a --text one\ncommit\nbegin\nenqueue a --text two\n";
    let o = qdb(dir.path(), &["txn"], script);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("(end of input)"), "{out}");
    let o = qdb(dir.path(), &["--json", "queue", "stats", "a"], "");
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["queue"]["depth_visible"], 1);
}

#[test]
fn bench_runs_and_reports_json() {
    let o = Command::new(env!("CARGO_BIN_EXE_qdb-bench"))
        .args(["enqueue_commit", "--messages", "50", "--concurrency", "2", "--work-us", "0", "--json"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["ops"], 50);
    let o = Command::new(env!("CARGO_BIN_EXE_qdb-bench")).arg("nonsense").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
