//! Run manifests: the hash of the settings a stage ran with and the
//! content hashes of every file it read and wrote.
//!
//! ```text
//! # msrf-manifest v1
//! stage = train
//! version = 0.1.0
//! config_hash = 3f1c...
//! seed = 0
//! input transfer_k1.txt = 9ab0...
//! output embeddings.csv = 77e2...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_HEADER: &str = "# msrf-manifest v1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::Missing(path.to_path_buf())
    } else {
        CliError::Io { path: path.to_path_buf(), source: e }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(stage: &str, config_hash: String, seed: u64) -> Self {
        Self {
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn path(workdir: &Path, stage: &str) -> PathBuf {
        workdir.join(format!("{}.manifest", stage))
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{}\nstage = {}\nversion = {}\nconfig_hash = {}\nseed = {}\n",
            MANIFEST_HEADER, self.stage, self.version, self.config_hash, self.seed
        );
        for (name, h) in &self.inputs {
            out.push_str(&format!("input {} = {}\n", name, h));
        }
        for (name, h) in &self.outputs {
            out.push_str(&format!("output {} = {}\n", name, h));
        }
        out
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(CliError::Stale("manifest has an unknown header".into()));
        }
        let mut m = Manifest::new("", String::new(), 0);
        for line in lines {
            let Some((k, v)) = line.split_once(" = ") else {
                return Err(CliError::Stale(format!("bad manifest line {:?}", line)));
            };
            match k {
                "stage" => m.stage = v.to_string(),
                "version" => m.version = v.to_string(),
                "config_hash" => m.config_hash = v.to_string(),
                "seed" => m.seed = v.parse().map_err(|_| CliError::Stale(format!("bad seed {:?}", v)))?,
                _ => match k.split_once(' ') {
                    Some(("input", name)) => m.inputs.push((name.to_string(), v.to_string())),
                    Some(("output", name)) => m.outputs.push((name.to_string(), v.to_string())),
                    _ => return Err(CliError::Stale(format!("bad manifest line {:?}", line))),
                },
            }
        }
        Ok(m)
    }

    pub fn read(workdir: &Path, stage: &str) -> CliResult<Option<Self>> {
        let path = Self::path(workdir, stage);
        match fs::read_to_string(&path) {
            Ok(text) => Self::parse(&text).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    pub fn write(&self, workdir: &Path) -> CliResult<()> {
        let path = Self::path(workdir, &self.stage);
        fs::write(&path, self.render()).map_err(|e| io_err(&path, e))
    }

    pub fn output(&self, name: &str) -> Option<&str> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, h)| h.as_str())
    }

    pub fn input(&self, name: &str) -> Option<&str> {
        self.inputs.iter().find(|(n, _)| n == name).map(|(_, h)| h.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let mut m = Manifest::new("train", "abc".into(), 3);
        m.inputs.push(("network".into(), "11".into()));
        m.outputs.push(("embeddings.csv".into(), "22".into()));
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
        assert_eq!(m.output("embeddings.csv"), Some("22"));
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
