use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quorumgate")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["pentest", "--vectors", "NotAVector"])), 1);
}

#[test]
fn scan_emitted_payload_and_benign_file() {
    let dir = tempfile::tempdir().unwrap();
    let attack = dir.path().join("coercive.xml");
    let o = run(&["scan", "--emit", "coercive-parsing", "--out", p(&attack)]);
    assert_eq!(code(&o), 0, "{o:?}");
    let o = run(&["scan", p(&attack)]);
    assert_eq!(code(&o), 0);
    let profile: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(profile["vectors"], serde_json::json!(["CoerciveParsing"]));

    let benign = dir.path().join("quote.xml");
    std::fs::write(&benign, quorumgate::soap::benign_request()).unwrap();
    let o = run(&["scan", p(&benign), "--header", "SOAPAction=\"PurchaseStock\""]);
    let profile: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(profile["vectors"], serde_json::json!(["SoapActionSpoofing"]));

    assert_eq!(code(&run(&["scan", p(&dir.path().join("missing.xml"))])), 2);
    assert_eq!(code(&run(&["scan"])), 2);
}

#[test]
fn registry_add_show_and_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let reg = dir.path().join("registry.toml");
    let add = |id: &str| {
        run(&[
            "registry",
            "add",
            "--registry",
            p(&reg),
            "--id",
            id,
            "--endpoint",
            "http://127.0.0.1:9001/ws",
            "--sla",
            "0.05",
        ])
    };
    assert_eq!(code(&add("a")), 0);
    assert_eq!(code(&add("b")), 0);
    assert_eq!(code(&add("a")), 2);
    let o = run(&["registry", "show", "--registry", p(&reg)]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("0.0500"));
    assert_eq!(out.lines().count(), 3);
    let bad = run(&["registry", "add", "--registry", p(&reg), "--id", "c", "--endpoint", "not a url"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn serve_refuses_thin_registry() {
    let dir = tempfile::tempdir().unwrap();
    let reg = dir.path().join("registry.toml");
    for (i, id) in ["a", "b", "c"].iter().enumerate() {
        let ep = format!("http://127.0.0.1:{}/ws", 9100 + i);
        assert_eq!(code(&run(&["registry", "add", "--registry", p(&reg), "--id", id, "--endpoint", &ep])), 0);
    }
    let o = run(&["serve", "--registry", p(&reg), "--listen", "127.0.0.1:0"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("needs 4"));
}

#[test]
fn pentest_with_missing_registry_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["pentest", "--registry", p(&dir.path().join("none.toml")), "--out", p(&dir.path().join("r.jsonl"))]);
    assert_eq!(code(&o), 2);
}
