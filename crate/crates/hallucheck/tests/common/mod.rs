#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hallucheck::PipelineConfig;

/// A configuration small enough to run every command in seconds.
pub const TINY: &str = r#"
seed = 7

[corpus]
heldout = 150

[corpus.toy]
pairs = 700

[model]
encoder_layers = 1
decoder_layers = 1
d_model = 16
heads = 2
d_ff = 32

[train]
steps = 600
batch_size = 16

[decode]
max_len = 30

[generation]
max_seeds = 60
train_size = 16
val_size = 8

[detector]
runs = 2

[detector.mlp]
seeds = 2
max_epochs = 150
patience = 50

[stress]
top_k = 5
rate = 0.1
"#;

pub fn tiny_config() -> PipelineConfig {
    PipelineConfig::from_toml(TINY, Path::new("tiny.toml")).unwrap()
}

pub fn write_tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hallucheck")).args(args).output().unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every file below `root` with its bytes, sorted by relative path.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}
