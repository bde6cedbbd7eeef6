//! JSON-lines dataset manifest.
//!
//! One entry per line: `{"path": ..., "label": ..., "split": ..., "duration_s": ...}`.
//! Paths are stored relative to the manifest file so a corpus directory can
//! be moved as a unit.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::wav::wav_duration_seconds;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Pretrain => write!(f, "pretrain"),
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One dataset row. `label` must be present exactly when the split is
/// labeled (train/test); pretrain rows are unlabeled by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub split: Split,
    pub duration_s: f64,
}

impl ManifestEntry {
    fn validate(&self) -> std::result::Result<(), String> {
        match (self.split, self.label) {
            (Split::Pretrain, Some(_)) => {
                Err("pretrain entries must not carry a label".to_string())
            }
            (Split::Train | Split::Test, None) => {
                Err(format!("split \"{}\" requires a label", self.split))
            }
            _ => {
                if self.duration_s <= 0.0 {
                    Err(format!("duration_s must be positive, got {}", self.duration_s))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Absolute path of the referenced audio file, resolved against the
    /// directory containing the manifest.
    pub fn resolve(&self, manifest_path: &Path) -> PathBuf {
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        base.join(&self.path)
    }
}

/// Reads and validates a JSON-lines manifest. Every referenced file must
/// exist and its header duration must agree with `duration_s`.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| Error::ManifestParse {
                line: line_no,
                msg: e.to_string(),
            })?;
        entry.validate().map_err(|msg| Error::ManifestParse {
            line: line_no,
            msg,
        })?;
        let audio_path = entry.resolve(path);
        if !audio_path.exists() {
            return Err(Error::MissingFile(audio_path));
        }
        let dur = wav_duration_seconds(&audio_path)?;
        if (dur - entry.duration_s).abs() > 1e-3 {
            return Err(Error::ManifestParse {
                line: line_no,
                msg: format!(
                    "duration_s {} disagrees with file duration {:.6}",
                    entry.duration_s, dur
                ),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Writes entries as JSON-lines.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    for e in entries {
        if let Err(msg) = e.validate() {
            return Err(Error::InvalidConfig(format!("manifest entry {}: {msg}", e.path)));
        }
    }
    let mut file = fs::File::create(path)?;
    for e in entries {
        let line = serde_json::to_string(e)?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}
