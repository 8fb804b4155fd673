//! Per-run manifest: resolved config, inputs, outputs and a content hash.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Resolved, SCHEMA_VERSION};
use crate::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Serialize)]
pub struct RunManifest<'a> {
    pub subcommand: &'a str,
    pub schema_version: u32,
    pub tool_version: &'a str,
    pub seed: u64,
    pub config: &'a Resolved,
    /// Subcommand arguments not covered by the config.
    pub args: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// SHA-256 over the canonical JSON of subcommand, config, args and inputs.
    pub config_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `out/run_manifest.json`.
pub fn write(
    out: &Path,
    subcommand: &str,
    cfg: &Resolved,
    args: serde_json::Value,
    inputs: &[PathBuf],
    outputs: &[&str],
) -> Result<(), CliError> {
    let inputs: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
    let hashed = serde_json::json!({ "subcommand": subcommand, "config": cfg, "args": args, "inputs": inputs });
    let config_hash = sha256_hex(serde_json::to_string(&hashed).map_err(|e| CliError::run("manifest", e))?.as_bytes());
    let m = RunManifest {
        subcommand,
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: cfg,
        args,
        inputs,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        config_hash,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::run("manifest", e))?;
    std::fs::write(out.join(MANIFEST_FILE), text + "\n").map_err(|e| CliError::run("io", e))
}
