//! `manifest.json`: every artifact in `out_dir` with the command and config
//! hash that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use textdistill_core::Error;

use crate::config::RunConfig;
use crate::error::CliResult;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub command: String,
    pub config_hash: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    /// Keyed by file name relative to `out_dir`.
    pub files: BTreeMap<String, Entry>,
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(cfg: &RunConfig) -> String {
    hex_sha256(cfg.to_text().as_bytes())
}

impl Manifest {
    pub fn load_or_new(dir: &Path) -> CliResult<Self> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Ok(Self {
                version: env!("CARGO_PKG_VERSION").to_string(),
                files: BTreeMap::new(),
            });
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn record(&mut self, command: &str, cfg: &RunConfig, files: &[PathBuf]) -> CliResult<()> {
        let hash = config_hash(cfg);
        for f in files {
            let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
            let name = f
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            self.files.insert(
                name,
                Entry {
                    command: command.to_string(),
                    config_hash: hash.clone(),
                    sha256: hex_sha256(&bytes),
                    bytes: bytes.len() as u64,
                },
            );
        }
        self.version = env!("CARGO_PKG_VERSION").to_string();
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let p = dir.join(MANIFEST);
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            hex_sha256(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
