//! Run manifest: each subcommand drops a `manifest.json` beside its outputs
//! recording which command produced them, under which seed, and the SHA-256 of
//! the exact config bytes. Deliberately timestamp-free so reruns are
//! byte-identical.

use std::path::Path;

use serde_json::json;

use crate::config::CONFIG_VERSION;
use crate::error::{CliError, Result};

pub fn write_manifest(
    out: &Path,
    command: &str,
    config_hash: &str,
    seed: u64,
    outputs: &[&str],
) -> Result<()> {
    let doc = json!({
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "versions": {
            "crate": env!("CARGO_PKG_VERSION"),
            "config": CONFIG_VERSION,
            "checkpoint_format": scot_core::nets::CHECKPOINT_FORMAT_VERSION,
        },
        "outputs": outputs,
    });
    let path = out.join("manifest.json");
    let mut body = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    body.push('\n');
    std::fs::write(&path, body).map_err(|e| CliError::Output { path, source: e })
}
