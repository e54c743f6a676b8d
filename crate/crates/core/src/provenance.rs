//! Provenance sidecars: `<artifact>.prov.json` next to every artifact.
//!
//! A sidecar records the command, the resolved config, digests of inputs and
//! of the artifact itself, plus artifact-specific details (seeds, specs).
//! There are no timestamps or host names, so regenerating an artifact from
//! its sidecar reproduces the sidecar byte for byte as well.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::io::write_atomic;

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub path: String,
    pub sha256: String,
}

impl InputRef {
    pub fn of_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(Self { path: path.display().to_string(), sha256: sha256_hex(&std::fs::read(path)?) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub artifact: String,
    pub tool: String,
    pub version: String,
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    #[serde(default)]
    pub inputs: Vec<InputRef>,
    pub output_sha256: String,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl Provenance {
    pub fn new(artifact: impl Into<String>, command: Vec<String>) -> Self {
        Self {
            artifact: artifact.into(),
            tool: "compdiff".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            config_sha256: None,
            config: None,
            inputs: Vec::new(),
            output_sha256: String::new(),
            details: serde_json::Value::Null,
        }
    }

    /// Record the config text verbatim along with its digest.
    pub fn with_config(mut self, text: &str) -> Self {
        self.config_sha256 = Some(sha256_hex(text.as_bytes()));
        self.config = Some(text.to_string());
        self
    }

    pub fn with_input(mut self, input: InputRef) -> Self {
        self.inputs.push(input);
        self
    }

    pub fn with_details(mut self, details: impl Serialize) -> Result<Self> {
        self.details = serde_json::to_value(details)?;
        Ok(self)
    }
}

pub fn sidecar_path(artifact: impl AsRef<Path>) -> PathBuf {
    let p = artifact.as_ref();
    let mut name = p.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".prov.json");
    p.with_file_name(name)
}

/// Write the artifact and its sidecar, both atomically; the sidecar is
/// written last so its presence implies a complete artifact.
pub fn write_with_provenance(path: impl AsRef<Path>, bytes: &[u8], mut prov: Provenance) -> Result<Provenance> {
    let path = path.as_ref();
    prov.output_sha256 = sha256_hex(bytes);
    write_atomic(path, bytes)?;
    let mut json = serde_json::to_vec_pretty(&prov)?;
    json.push(b'\n');
    write_atomic(sidecar_path(path), &json)?;
    Ok(prov)
}

pub fn read_provenance(artifact: impl AsRef<Path>) -> Result<Provenance> {
    let bytes = std::fs::read(sidecar_path(artifact))?;
    Ok(serde_json::from_slice(&bytes)?)
}
