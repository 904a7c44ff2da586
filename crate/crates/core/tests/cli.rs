use std::path::Path;
use std::process::{Command, Output};

use hetlearn::harness::metrics::RAW_HEADER;

const TINY: &str = r#"{
  "name": "tiny",
  "task": {"supervised": {
    "data": {"synthetic": {"spec": {"num_classes": 3, "per_class": 20, "dims": 4, "class_separation": 3.0}, "test_per_class": 10}},
    "trainer": {"round_samples": 30, "minibatch": 6}
  }},
  "mode": "heterogeneous",
  "topology": {
    "scheme": "share-first",
    "input_shape": [4],
    "stem": [{"type": "dense", "units": 5}, {"type": "relu"}],
    "branches": [
      {"name": "big", "layers": [{"type": "dense", "units": 8}, {"type": "relu"}, {"type": "dense", "units": 3}, {"type": "softmax"}]},
      {"name": "small", "layers": [{"type": "dense", "units": 3}, {"type": "softmax"}]}
    ]
  },
  "devices": [
    {"branch": "big", "data_fraction": 0.6, "optimizer": {"kind": "sgd", "learning_rate": 0.05}},
    {"branch": "small", "data_fraction": 0.4, "optimizer": {"kind": "sgd", "learning_rate": 0.05}}
  ],
  "rounds": 6,
  "seeds": [1, 2]
}"#;

fn hetlearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetlearn")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn describe_prints_branch_counts() {
    let topo = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/topologies/atari.json");
    let out = hetlearn(&["describe", topo]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("1687206"), "{text}");
    assert!(text.contains("71214"), "{text}");
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("out");
    let out = hetlearn(&["run", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let raw = read(&out_dir.join("metrics.csv"));
    assert_eq!(raw.lines().next(), Some(RAW_HEADER));
    assert!(raw.lines().any(|l| l.starts_with("2,6,1,")));
    assert!(out_dir.join("aggregated.csv").exists());
    let summary: serde_json::Value = serde_json::from_str(&read(&out_dir.join("summary.json"))).unwrap();
    assert!(summary.is_object());
}

#[test]
fn checkpointed_resume_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let straight = dir.path().join("straight");
    assert!(hetlearn(&["run", &cfg, "--out", straight.to_str().unwrap()]).status.success());

    let short = TINY.replace("\"rounds\": 6", "\"rounds\": 3");
    let short_cfg = dir.path().join("short.json");
    std::fs::write(&short_cfg, short).unwrap();
    let resumed = dir.path().join("resumed");
    let r = resumed.to_str().unwrap();
    assert!(hetlearn(&["run", short_cfg.to_str().unwrap(), "--out", r, "--checkpoint-every", "1"]).status.success());
    assert!(hetlearn(&["run", &cfg, "--out", r, "--resume"]).status.success());
    assert_eq!(read(&resumed.join("metrics.csv")), read(&straight.join("metrics.csv")));
}

#[test]
fn aggregate_subcommand_matches_run_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("out");
    assert!(hetlearn(&["run", &cfg, "--out", out_dir.to_str().unwrap()]).status.success());
    let agg = dir.path().join("again.csv");
    let out = hetlearn(&["aggregate", out_dir.join("metrics.csv").to_str().unwrap(), "--out", agg.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(read(&agg), read(&out_dir.join("aggregated.csv")));
}

#[test]
fn seed_offset_shifts_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("out");
    assert!(hetlearn(&["run", &cfg, "--out", out_dir.to_str().unwrap(), "--seed-offset", "10"]).status.success());
    let raw = read(&out_dir.join("metrics.csv"));
    let seeds: std::collections::BTreeSet<&str> = raw.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(seeds.into_iter().collect::<Vec<_>>(), ["11", "12"]);
}

#[test]
fn bad_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("\"rounds\": 6", "\"rounds\": \"six\""));
    let out = hetlearn(&["run", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}
