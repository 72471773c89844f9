//! The `run.toml` record written by every invocation.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

pub const MANIFEST_FILE: &str = "run.toml";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub subcommand: String,
    /// Arguments after the program name, verbatim.
    pub args: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    pub seed: u64,
    pub out: String,
    /// Effective configuration written next to the manifest, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effective_config: Option<String>,
    pub status: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl RunManifest {
    pub fn write(&self, out: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing run manifest")?;
        std::fs::write(out.join(MANIFEST_FILE), text).context("writing run manifest")
    }
}
