//! Versioned JSON archive of a fit.

use std::path::Path;

use gamem::em::FitResult;
use serde::{Deserialize, Serialize};

use crate::config::{fingerprint, ModelConfig};
use crate::error::{input, Result};

pub const FORMAT: &str = "gamem-fit";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitArchive {
    pub format: String,
    pub version: u32,
    /// See [`fingerprint`].
    pub fingerprint: String,
    pub config: ModelConfig,
    pub n: usize,
    pub fit: FitResult,
}

#[derive(Deserialize)]
struct Header {
    format: Option<String>,
    version: Option<u32>,
}

impl FitArchive {
    pub fn new(config: ModelConfig, n: usize, fit: FitResult) -> Self {
        FitArchive {
            format: FORMAT.into(),
            version: VERSION,
            fingerprint: fingerprint(&config.model_spec()),
            config,
            n,
            fit,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("archive serializes");
        std::fs::write(path, json + "\n").map_err(|e| input(format!("cannot write {}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: Header = serde_json::from_str(text).map_err(|e| input(format!("not a fit archive: {e}")))?;
        if header.format.as_deref() != Some(FORMAT) {
            return Err(input(format!("not a fit archive (format {:?})", header.format)));
        }
        if header.version != Some(VERSION) {
            return Err(input(format!(
                "archive version {:?} is not supported (expected {VERSION})",
                header.version
            )));
        }
        let archive: FitArchive = serde_json::from_str(text).map_err(|e| input(format!("corrupt archive: {e}")))?;
        if archive.fingerprint != fingerprint(&archive.config.model_spec()) {
            return Err(input("archive fingerprint does not match its model configuration"));
        }
        if archive.fit.family != archive.config.family {
            return Err(input("archive family does not match its model configuration"));
        }
        Ok(archive)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| input(format!("{}: {e}", path.display())))
    }
}
