//! Run directory layout: `<root>/<experiment>/<seed>/` holding a
//! `manifest.json` with the config, seed and artifact checksums.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const CORPUS: &str = "corpus.jsonl";
pub const RANK_MODEL: &str = "rank_model.ckpt";
pub const RANK_MODEL_LOG: &str = "rank_model_log.jsonl";
pub const RANK_MODEL_EVAL: &str = "rank_model_eval.json";
pub const CALIBRATORS: &str = "calibrators";
pub const REFLECT_LOG: &str = "reflect_log.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const EXPERIMENT_REPORT: &str = "experiment.json";
pub const RECORDS: &str = "records.csv";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn calibrator_name(user_id: &str) -> String {
    format!("{CALIBRATORS}/{user_id}.ckpt")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Artifact path relative to the run directory → hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(experiment: &str, seed: u64, config: serde_json::Value) -> Self {
        Manifest {
            experiment: experiment.to_string(),
            seed,
            config,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Manifest>> {
        let path = dir.join(MANIFEST);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| Error::config(format!("{}: malformed manifest: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn require(dir: &Path) -> Result<Manifest> {
        Manifest::load(dir)?.ok_or_else(|| Error::MissingArtifact {
            artifact: MANIFEST,
            dir: dir.to_path_buf(),
            producer: "gen-data",
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_file(&dir.join(MANIFEST), text.as_bytes())
    }

    /// Writes an artifact and records its checksum.
    pub fn write_artifact(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        write_file(&dir.join(name), bytes)?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Reads an artifact, checking it against the recorded checksum.
    pub fn read_artifact(
        &self,
        dir: &Path,
        name: &str,
        artifact: &'static str,
        producer: &'static str,
    ) -> Result<Vec<u8>> {
        let path = dir.join(name);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingArtifact {
                    artifact,
                    dir: dir.to_path_buf(),
                    producer,
                })
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        match self.artifacts.get(name) {
            Some(sum) if *sum == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(Error::config(format!(
                "{} changed since it was written; run {producer} again",
                path.display()
            ))),
            None => Err(Error::MissingArtifact {
                artifact,
                dir: dir.to_path_buf(),
                producer,
            }),
        }
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Seed directories directly below an experiment directory, by seed.
pub fn seed_dirs(experiment_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(experiment_dir).map_err(|e| Error::io(experiment_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(experiment_dir, e))?;
        if let Some(seed) = entry
            .file_name()
            .to_str()
            .and_then(|s| s.parse::<u64>().ok())
        {
            if entry.path().join(MANIFEST).is_file() {
                out.push((seed, entry.path()));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_guards_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new("x", 1, serde_json::json!({}));
        m.write_artifact(dir.path(), "a/b.txt", b"hello").unwrap();
        m.save(dir.path()).unwrap();
        let back = Manifest::require(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            back.read_artifact(dir.path(), "a/b.txt", "b", "gen-data")
                .unwrap(),
            b"hello"
        );
        std::fs::write(dir.path().join("a/b.txt"), b"tampered").unwrap();
        assert!(back
            .read_artifact(dir.path(), "a/b.txt", "b", "gen-data")
            .is_err());
        let err = back
            .read_artifact(dir.path(), "missing", "thing", "train-rm")
            .unwrap_err();
        assert!(err.to_string().contains("run train-rm first"));
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
