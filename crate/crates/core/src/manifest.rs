//! Run manifests: the full invocation plus hashes of every input and output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_MANIFEST_FORMAT: &str = "gazeforge-run-1";
/// Written into each command's output directory and excluded from its artifacts.
pub const RUN_MANIFEST_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    /// Relative to the output directory for outputs; as given for inputs.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    /// The complete invocation with resolved paths; replayed as-is.
    pub invocation: serde_json::Value,
    pub seed: Option<u64>,
    pub crate_version: String,
    pub threads: usize,
    pub formats: BTreeMap<String, String>,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub started_unix_secs: f64,
    pub elapsed_secs: f64,
}

/// A difference between a recorded and a reproduced file set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Mismatch {
    Missing(String),
    Extra(String),
    Differs(String),
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mismatch::Missing(p) => write!(f, "missing: {p}"),
            Mismatch::Extra(p) => write!(f, "not in the recorded run: {p}"),
            Mismatch::Differs(p) => write!(f, "contents differ: {p}"),
        }
    }
}

pub fn format_versions() -> BTreeMap<String, String> {
    [
        ("run", RUN_MANIFEST_FORMAT),
        ("tensor", "GZT1"),
        ("checkpoint", "GZT1"),
        ("dataset", crate::dataset::MANIFEST_FORMAT),
        ("image", "PNM P5/P6"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn hash_file(path: &Path, label: String) -> Result<Artifact> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Artifact {
        path: label,
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Hashes every file under `dir` except a top-level run manifest, sorted by
/// relative path with `/` separators.
pub fn collect_artifacts(dir: &Path) -> Result<Vec<Artifact>> {
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let rel = f.strip_prefix(dir).expect("walk stays under dir");
        if rel == Path::new(RUN_MANIFEST_FILE) {
            continue;
        }
        let label = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.push(hash_file(&f, label)?);
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

/// Hashes a file, or every file under a directory.
pub fn hash_inputs(paths: &[&Path]) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            for mut a in collect_artifacts(p)? {
                a.path = p.join(&a.path).display().to_string();
                out.push(a);
            }
        } else {
            out.push(hash_file(p, p.display().to_string())?);
        }
    }
    Ok(out)
}

/// Compares two artifact lists by path and content hash.
pub fn compare(recorded: &[Artifact], actual: &[Artifact]) -> Vec<Mismatch> {
    let want: BTreeMap<&str, &str> = recorded.iter().map(|a| (a.path.as_str(), a.sha256.as_str())).collect();
    let have: BTreeMap<&str, &str> = actual.iter().map(|a| (a.path.as_str(), a.sha256.as_str())).collect();
    let mut out = Vec::new();
    for (p, h) in &want {
        match have.get(p) {
            None => out.push(Mismatch::Missing(p.to_string())),
            Some(g) if g != h => out.push(Mismatch::Differs(p.to_string())),
            Some(_) => {}
        }
    }
    out.extend(have.keys().filter(|p| !want.contains_key(*p)).map(|p| Mismatch::Extra(p.to_string())));
    out
}

impl RunManifest {
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join(RUN_MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if m.format != RUN_MANIFEST_FORMAT {
            return Err(Error::Format(format!("unsupported run manifest format `{}`", m.format)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn artifacts_skip_manifest_and_detect_changes() {
        let d = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(d.path().join("sub")).unwrap();
        std::fs::write(d.path().join("b.txt"), "b").unwrap();
        std::fs::write(d.path().join("sub/a.txt"), "a").unwrap();
        std::fs::write(d.path().join(RUN_MANIFEST_FILE), "{}").unwrap();
        let a = collect_artifacts(d.path()).unwrap();
        let names: Vec<&str> = a.iter().map(|x| x.path.as_str()).collect();
        assert_eq!(names, ["b.txt", "sub/a.txt"]);
        assert!(compare(&a, &a).is_empty());

        std::fs::write(d.path().join("b.txt"), "B").unwrap();
        std::fs::write(d.path().join("c.txt"), "c").unwrap();
        std::fs::remove_file(d.path().join("sub/a.txt")).unwrap();
        let m = compare(&a, &collect_artifacts(d.path()).unwrap());
        assert_eq!(
            m,
            [
                Mismatch::Differs("b.txt".into()),
                Mismatch::Missing("sub/a.txt".into()),
                Mismatch::Extra("c.txt".into())
            ]
        );
    }
}
