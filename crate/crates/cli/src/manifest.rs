//! Run manifest: resolved configuration hash, seed, catalog version, and a
//! checksum per written artifact. Reruns with identical configuration and
//! inputs produce byte-identical manifests.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_SCHEMA: &str = "ecgpd-manifest/v1";

#[derive(Serialize)]
pub struct Manifest {
    pub schema: &'static str,
    pub command: String,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catalog_version: Option<String>,
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the resolved (post-default, post-config-file) parameters.
pub fn config_hash<T: Serialize>(command: &str, resolved: &T) -> String {
    let payload = serde_json::json!({ "command": command, "config": resolved });
    sha256_hex(serde_json::to_string(&payload).expect("config serializes").as_bytes())
}

/// Collects artifact checksums as files are written, then emits
/// `manifest.json` alongside them.
pub struct ManifestBuilder {
    out_dir: PathBuf,
    manifest: Manifest,
}

impl ManifestBuilder {
    pub fn new(out_dir: &Path, command: &str, config_hash: String) -> Self {
        ManifestBuilder {
            out_dir: out_dir.to_path_buf(),
            manifest: Manifest {
                schema: MANIFEST_SCHEMA,
                command: command.to_string(),
                config_hash,
                seed: None,
                catalog_version: None,
                artifacts: BTreeMap::new(),
            },
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.manifest.seed = Some(seed);
        self
    }

    pub fn catalog_version(&mut self, version: &str) -> &mut Self {
        self.manifest.catalog_version = Some(version.to_string());
        self
    }

    /// Record a file that was just written into the output directory.
    pub fn add(&mut self, file_name: &str) -> std::io::Result<()> {
        let bytes = fs::read(self.out_dir.join(file_name))?;
        self.manifest
            .artifacts
            .insert(file_name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self) -> std::io::Result<()> {
        let path = self.out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(path, json + "\n")
    }
}
