//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use spherewarp_registration::RegistrationConfig;

use crate::error::{CliError, Result};

/// Registration settings plus the paths a run reads and writes. Command-line
/// flags take precedence over the paths given here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub registration: RegistrationConfig,
    pub moving: Option<PathBuf>,
    pub atlas_mean: Option<PathBuf>,
    pub atlas_var: Option<PathBuf>,
    pub atlas_labels: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// U-Net widths for `train`.
    pub widths: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::from(e).context(path.display()))?;
        Self::parse(&text).map_err(|e| e.context(path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.registration.validate().map_err(CliError::from)?;
        if let Some(w) = &self.widths {
            if w.len() != spherewarp_registration::DEFAULT_WIDTHS.len() || w.contains(&0) {
                return Err(CliError::config(format!(
                    "widths must list {} positive values",
                    spherewarp_registration::DEFAULT_WIDTHS.len()
                )));
            }
        }
        Ok(())
    }
}

/// Lower-case hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configs serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolves a required path from a flag, then the config, else a usage error.
pub fn require_path(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| CliError::usage(format!("missing --{name} (flag or config key)")))
}
