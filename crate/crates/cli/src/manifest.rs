use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use multiscale_sae::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance record written once into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Digest of the canonical JSON of the effective configuration.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Command-specific, non-deterministic extras such as timings.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<FileDigest> {
    let mut f = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let sha256 = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(FileDigest { path: path.to_path_buf(), sha256 })
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or_default()
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>, inputs: &[&Path]) -> Result<Self> {
        // serde_json maps are ordered by key, so this encoding is canonical
        let config_hash = sha256_hex(serde_json::to_string(&config)?.as_bytes());
        Ok(Self {
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            config_hash,
            config,
            seed,
            inputs: inputs
                .iter()
                .map(|p| file_digest(&fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())))
                .collect::<Result<_>>()?,
            artifacts: Vec::new(),
            started_unix: now_unix(),
            finished_unix: 0,
            extra: serde_json::Value::Null,
        })
    }

    /// Record every regular file below `dir` except the manifest itself,
    /// with paths relative to `dir`, and write the manifest.
    pub fn finish(mut self, dir: &Path) -> Result<Self> {
        let mut files = Vec::new();
        collect_files(dir, dir, &mut files)?;
        files.sort();
        self.artifacts = files
            .into_iter()
            .filter(|p| p != Path::new(MANIFEST_FILE))
            .map(|rel| file_digest(&dir.join(&rel)).map(|d| FileDigest { path: rel, sha256: d.sha256 }))
            .collect::<Result<_>>()?;
        self.finished_unix = now_unix();
        let text = serde_json::to_string_pretty(&self)? + "\n";
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }

    /// Inputs whose current digest differs from the recorded one.
    pub fn changed_inputs(&self) -> Vec<PathBuf> {
        self.inputs
            .iter()
            .filter(|d| file_digest(&d.path).map(|now| now.sha256 != d.sha256).unwrap_or(true))
            .map(|d| d.path.clone())
            .collect()
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("below root").to_path_buf());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn records_artifacts_and_detects_changed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.csv");
        fs::write(&input, "a\n1\n").unwrap();
        let out = dir.path().join("out");
        fs::create_dir_all(out.join("sub")).unwrap();
        fs::write(out.join("x.csv"), "x").unwrap();
        fs::write(out.join("sub/y.csv"), "y").unwrap();
        let m = RunManifest::new("test", serde_json::json!({"b": 1, "a": 2}), Some(3), &[&input]).unwrap();
        let m = m.finish(&out).unwrap();
        let paths: Vec<_> = m.artifacts.iter().map(|a| a.path.clone()).collect();
        assert_eq!(paths, vec![PathBuf::from("sub/y.csv"), PathBuf::from("x.csv")]);
        assert_eq!(RunManifest::read(&out).unwrap(), m);
        assert!(m.changed_inputs().is_empty());
        fs::write(&input, "a\n2\n").unwrap();
        assert_eq!(m.changed_inputs(), vec![input]);
    }
}
