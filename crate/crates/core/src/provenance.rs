//! Content hashes and `.meta.json` sidecars tying outputs to their configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Hex SHA-256 of the canonical JSON form of `value` (object keys sorted).
pub fn config_hash(value: &impl Serialize) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    Ok(hex_digest(serde_json::to_string(&canonical)?.as_bytes()))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub output_sha256: String,
    pub tool_version: String,
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    output.with_file_name(name)
}

/// Writes `<output>.meta.json` next to an already written output file.
pub fn write_sidecar(output: &Path, config: &impl Serialize) -> Result<PathBuf> {
    let sidecar = Sidecar {
        config_hash: config_hash(config)?,
        config: serde_json::to_value(config)?,
        output_sha256: file_digest(output)?,
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
    };
    let path = sidecar_path(output);
    let text = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_sidecar(output: &Path) -> Result<Sidecar> {
    let path = sidecar_path(output);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
