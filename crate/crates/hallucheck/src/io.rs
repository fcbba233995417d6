//! Small file helpers shared by the commands.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_string(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// One compact JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::format(path, e.to_string()))?;
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Parallel corpus: UTF-8, one pair per line, source and target separated
/// by a single tab.
pub fn read_corpus(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(t), None) => pairs.push((s.to_string(), t.to_string())),
            _ => return Err(Error::format(path, format!("line {}: expected exactly one tab", i + 1))),
        }
    }
    Ok(pairs)
}

pub fn write_corpus(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = Vec::new();
    for (s, t) in pairs {
        if s.contains(['\t', '\n']) || t.contains(['\t', '\n']) {
            return Err(Error::format(path, "sentence contains a tab or newline"));
        }
        writeln!(out, "{s}\t{t}").expect("write to memory");
    }
    write_bytes(path, &out)
}

/// Source-only input: one sentence per line; a tab-separated second
/// column is ignored.
pub fn read_sources(path: &Path) -> Result<Vec<String>> {
    Ok(read_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split('\t').next().unwrap_or("").to_string())
        .collect())
}

/// Refuse to replace existing outputs unless `overwrite` is set.
pub fn check_outputs(paths: &[&Path], overwrite: bool) -> Result<()> {
    if overwrite {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::Exists { path: p.to_path_buf() }),
        None => Ok(()),
    }
}
