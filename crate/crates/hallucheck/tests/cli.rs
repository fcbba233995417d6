mod common;

use common::{cli, stderr};

#[test]
fn usage_errors_exit_with_one() {
    let o = cli(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
    let o = cli(&["contributions"]);
    assert_eq!(o.status.code(), Some(1), "missing --mode");
    let o = cli(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[decode]\nbeam = 0\n").unwrap();
    let o = cli(&["--config", cfg.to_str().unwrap(), "train-model"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("decode.beam"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cli(&["--out", out, "generate-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train-model"), "{}", stderr(&o));
}

#[test]
fn empty_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("empty.tsv");
    std::fs::write(&corpus, "").unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, format!("[paths]\ncorpus = {:?}\n", corpus.to_str().unwrap())).unwrap();
    let o = cli(&["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "train-model"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corpus is empty"), "{}", stderr(&o));
}

#[test]
fn train_model_writes_once_unless_overwriting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_tiny_config(dir.path());
    let out = dir.path().join("run");
    let args = |extra: &[&'static str]| {
        let mut a = vec!["--config".to_string(), cfg.display().to_string(), "--out".into(), out.display().to_string()];
        a.extend(extra.iter().map(|s| s.to_string()));
        a.push("train-model".into());
        a
    };
    let run = |a: Vec<String>| cli(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let first = run(args(&[]));
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let bytes = std::fs::read(out.join("model/weights.hcw")).unwrap();
    let second = run(args(&[]));
    assert_eq!(second.status.code(), Some(1));
    assert!(stderr(&second).contains("--overwrite"));
    let third = run(args(&["--overwrite"]));
    assert_eq!(third.status.code(), Some(0));
    assert_eq!(std::fs::read(out.join("model/weights.hcw")).unwrap(), bytes);
}
