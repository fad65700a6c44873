use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn teecc(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teecc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .current_dir(repo())
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn scenario_runs_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = teecc(d.path(), &["run", "--scenario", "scenarios/small-auction.json"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ra, rb) = (report(a.path()), report(b.path()));
    assert_eq!(ra, rb);
    assert!(ra["height"].as_u64().unwrap() > 1);

    let c = tempfile::tempdir().unwrap();
    teecc(c.path(), &["run", "--scenario", "scenarios/small-auction.json", "--seed", "8"]);
    assert_ne!(report(c.path())["state_hashes"], ra["state_hashes"]);
}

#[test]
fn auction_names_the_highest_bidder() {
    let d = tempfile::tempdir().unwrap();
    let o = teecc(d.path(), &["auction", "--bids", "10,25,7"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("winner: bidder01 with 25"), "{}", stdout(&o));
}

#[test]
fn corpus_passes_and_weakening_fails() {
    let d = tempfile::tempdir().unwrap();
    let o = teecc(d.path(), &["attack", "--attack", "crates/core/corpus"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    assert!(d.path().join("logs/02-sequence-gap.jsonl").exists());

    let o = teecc(d.path(), &["attack", "--attack", "crates/core/corpus/02-sequence-gap.json", "--weaken", "sequence"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn scenario_can_point_at_an_attack() {
    let d = tempfile::tempdir().unwrap();
    let o = teecc(d.path(), &["--scenario", "scenarios/rollback-attack.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn malformed_scenario_reports_its_position() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"seed\": 1,\n  \"peers\": \"three\"\n}\n").unwrap();
    let o = teecc(d.path(), &["run", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");
}
