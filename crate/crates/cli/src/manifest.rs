//! Run-directory manifest and the small JSON/JSONL writers shared by the
//! commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use promptgrad::ErrorCategory;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const SPLITS: &str = "splits.json";
pub const GRADED: &str = "graded.jsonl";
pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub command: String,
    pub config_digest: String,
    /// Path as given to sha256 of the file bytes.
    pub dataset_digests: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script_digest: Option<String>,
    pub version: String,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config_digest: String,
        dataset_digests: BTreeMap<String, String>,
        mock_script_digest: Option<String>,
    ) -> Self {
        let created_at = Utc::now();
        Self {
            run_id: format!(
                "{command}-{}-{}",
                created_at.format("%Y%m%dT%H%M%S%.3fZ"),
                &config_digest[..8]
            ),
            created_at,
            command: command.to_owned(),
            config_digest,
            dataset_digests,
            mock_script_digest,
            version: format!(
                "promptgrad {} (templates {})",
                env!("CARGO_PKG_VERSION"),
                promptgrad::textgrad::TEMPLATE_VERSION
            ),
        }
    }

    /// Checks that a resumed run sees the same config and data.
    pub fn check_resume(&self, fresh: &RunManifest) -> Result<(), CliError> {
        if self.command != fresh.command {
            return Err(config(format!(
                "run directory holds a {} run, not {}",
                self.command, fresh.command
            )));
        }
        if self.config_digest != fresh.config_digest {
            return Err(config("config differs from the interrupted run"));
        }
        if self.dataset_digests != fresh.dataset_digests {
            return Err(config("dataset files differ from the interrupted run"));
        }
        Ok(())
    }
}

fn config(msg: impl Into<String>) -> CliError {
    CliError::new(ErrorCategory::Config, msg)
}

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(ErrorCategory::Io, format!("{}: {e}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| {
        CliError::new(
            ErrorCategory::Data,
            format!("cannot read {}: {e}", path.display()),
        )
    })?;
    Ok(sha256_hex(&bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::new(ErrorCategory::Data, format!("{}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for v in values {
        text.push_str(&serde_json::to_string(v).expect("serializable"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}
