//! Run manifests: every command writes one, capturing the resolved
//! configuration and content hashes of its inputs and outputs. The exit
//! status is nonzero exactly when the manifest carries an error section.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use radar_core::query::fnv1a64;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            error: None,
        }
    }

    pub fn record_input(&mut self, path: &Path) {
        self.inputs
            .insert(path.display().to_string(), hash_file(path));
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs
            .insert(path.display().to_string(), hash_file(path));
    }

    pub fn write(&self, out_dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("manifest.json");
        std::fs::write(
            &path,
            serde_json::to_string_pretty(self).expect("manifest serializes"),
        )?;
        Ok(path)
    }
}

pub fn hash_file(path: &Path) -> String {
    match std::fs::read(path) {
        Ok(bytes) => format!("{:016x}", fnv1a64(&bytes)),
        Err(_) => "unreadable".to_string(),
    }
}

/// Writes a file and records its hash in one step.
pub fn write_output(
    manifest: &mut Manifest,
    out_dir: &Path,
    name: &str,
    contents: &str,
) -> Result<PathBuf, String> {
    std::fs::create_dir_all(out_dir).map_err(|e| format!("create {}: {e}", out_dir.display()))?;
    let path = out_dir.join(name);
    std::fs::write(&path, contents).map_err(|e| format!("write {}: {e}", path.display()))?;
    manifest.record_output(&path);
    Ok(path)
}
