//! Run manifests: the resolved config, a content hash of the inputs and the
//! hashes of everything a run wrote.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand path, e.g. `"verify lemma"`.
    pub command: String,
    pub config_echo: Value,
    /// SHA-256 over the config and any input files, each framed as a git blob.
    pub input_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub duration_secs: f64,
    /// Output file (relative to the run directory) to its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

/// Incremental hash of a list of inputs; each is framed as
/// `blob <len>\0<bytes>` so that boundaries are unambiguous.
#[derive(Default)]
pub struct InputHasher(Sha256);

impl InputHasher {
    pub fn add(&mut self, bytes: &[u8]) {
        self.0.update(format!("blob {}\0", bytes.len()).as_bytes());
        self.0.update(bytes);
    }

    pub fn finish(self) -> String {
        hex(&self.0.finalize())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects the files of one run and writes them with a manifest.
pub struct OutputSet {
    files: BTreeMap<String, Vec<u8>>,
}

impl OutputSet {
    pub fn new() -> Self {
        Self {
            files: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.insert(name.into(), bytes.into());
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    pub fn write(self, dir: &Path, mut manifest: RunManifest) -> anyhow::Result<RunManifest> {
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)
                    .with_context(|| format!("creating {}", parent.display()))?;
            }
            std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            manifest.outputs.insert(name.clone(), sha256_hex(bytes));
        }
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        std::fs::write(dir.join(MANIFEST_FILE), bytes)?;
        Ok(manifest)
    }
}
