//! JSON sidecars recording how each output was produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::format::{write_atomic, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub command_line: Vec<String>,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub format_version: u16,
    pub versions: BTreeMap<String, String>,
    pub output: String,
}

/// Invocation facts shared by every output of one command.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub argv: Vec<String>,
    pub threads: usize,
}

impl RunContext {
    pub fn new(argv: Vec<String>, threads: usize) -> Self {
        Self { argv, threads }
    }
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("spherewarp-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("spherewarp-core".to_string(), spherewarp_core::VERSION.to_string()),
        ("spherewarp-registration".to_string(), spherewarp_registration::VERSION.to_string()),
    ])
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".prov.json");
    output.with_file_name(name)
}

/// Writes `<output>.prov.json` next to `output`.
pub fn write_sidecar(output: &Path, ctx: &RunContext, config_sha256: &str, seed: Option<u64>) -> Result<()> {
    let prov = Provenance {
        tool: "spherewarp".into(),
        command_line: ctx.argv.clone(),
        config_sha256: config_sha256.to_string(),
        seed,
        threads: ctx.threads,
        format_version: FORMAT_VERSION,
        versions: versions(),
        output: output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let text = serde_json::to_string_pretty(&prov).expect("provenance serializes");
    write_atomic(&sidecar_path(output), text.as_bytes())?;
    Ok(())
}
