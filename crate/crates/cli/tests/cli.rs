use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tidepool(store: &Path, config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tidepool"));
    cmd.arg("--store").arg(store);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().unwrap()
}

fn mock_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tidepool.toml");
    std::fs::write(&path, "[clients]\nmode = \"mock\"\n[frames]\nextractor = \"mock\"\n").unwrap();
    path
}

fn json_out(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    assert_eq!(tidepool(&store, None, &[]).status.code(), Some(2));
    assert_eq!(tidepool(&store, None, &["assemble"]).status.code(), Some(2));
    assert_eq!(tidepool(&store, None, &["assemble", "--stage", "stage3"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[thresholds]\nsimilarity = 7\n").unwrap();
    assert_eq!(tidepool(&store, Some(&bad), &["stats"]).status.code(), Some(2));
    assert_eq!(tidepool(&store, Some(&dir.path().join("absent.toml")), &["stats"]).status.code(), Some(2));
}

#[test]
fn failed_job_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = tidepool(&dir.path().join("store"), None, &["ingest", "--dump", "no-such-dump.tsv"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json_out(&out)["state"], "failed");
}

#[test]
fn subtitled_video_through_assembly() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tidepool::mock::write_demo_corpus(&dir.path().join("corpus")).unwrap();
    let config = mock_config(dir.path());
    let store = dir.path().join("store");
    let run = |args: &[&str]| tidepool(&store, Some(&config), args);

    let out = run(&[
        "ingest",
        "--subtitled-video",
        corpus.subtitled_video.to_str().unwrap(),
        corpus.subtitles.to_str().unwrap(),
        "--category",
        "Amphiprion ocellaris",
        "--taxa",
        corpus.taxa.to_str().unwrap(),
        "--facts",
        corpus.facts.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_out(&out)["result"]["ingested"], 6);
    assert!(run(&["expand"]).status.success());
    assert!(run(&["instruct", "--generator", "template-fact"]).status.success());

    let blocked = run(&["assemble", "--stage", "pretrain"]);
    assert_eq!(blocked.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&blocked.stderr).contains("UnresolvedReviewItems"));
    let ok = run(&["assemble", "--stage", "finetune", "--exclude-pending"]);
    assert!(ok.status.success());
    assert_eq!(json_out(&ok)["result"]["resize_target"], 384);

    let stats = json_out(&run(&["stats"]));
    assert_eq!(stats["records"], 6);
    assert_eq!(stats["review"]["pending"], 6);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("d.tsv");
    tidepool::mock::synthetic_image("x", 80, 80).save(dir.path().join("x.png")).unwrap();
    std::fs::write(&dump, "x.png\n").unwrap();
    let config = mock_config(dir.path());
    let a = json_out(&tidepool(
        &dir.path().join("s1"),
        Some(&config),
        &["--seed", "1", "ingest", "--dump", dump.to_str().unwrap()],
    ));
    let b = json_out(&tidepool(
        &dir.path().join("s2"),
        Some(&config),
        &["--seed", "2", "ingest", "--dump", dump.to_str().unwrap()],
    ));
    assert_ne!(a["fingerprint"], b["fingerprint"]);
}
