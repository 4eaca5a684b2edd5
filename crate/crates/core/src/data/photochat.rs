//! JSONL corpus loading and writing.
//!
//! One record per dialog-image sample:
//! `{"turns":[{"speaker":0,"text":"..."}...],"image":"relative/path.png","category":"optional"}`.
//! A turn may carry `"share_photo":true`; that turn and everything after it
//! are dropped, leaving exactly the turns that precede the image.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dialog::{Dialog, Turn};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct RawTurn {
    speaker: u8,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    share_photo: Option<bool>,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    turns: Vec<RawTurn>,
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
}

#[derive(Debug)]
pub struct LoadReport {
    pub dialogs: Vec<Dialog>,
    /// Records dropped because their image file does not exist.
    pub skipped_missing_image: usize,
}

/// Load a JSONL corpus; image paths resolve relative to the file.
pub fn load_photochat(path: &Path) -> Result<LoadReport> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut dialogs = Vec::new();
    let mut skipped = 0usize;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::DataLine {
            line: lineno,
            msg: format!("malformed record: {e}"),
        })?;
        let cut = raw
            .turns
            .iter()
            .position(|t| t.share_photo == Some(true))
            .unwrap_or(raw.turns.len());
        let turns: Vec<Turn> = raw.turns[..cut]
            .iter()
            .map(|t| Turn {
                speaker: t.speaker,
                text: t.text.clone(),
            })
            .collect();
        let dialog = Dialog {
            turns,
            image_ref: raw.image,
            category: raw.category,
        };
        dialog.validate().map_err(|e| Error::DataLine {
            line: lineno,
            msg: e.to_string(),
        })?;
        if !base.join(&dialog.image_ref).exists() {
            skipped += 1;
            continue;
        }
        dialogs.push(dialog);
    }
    Ok(LoadReport {
        dialogs,
        skipped_missing_image: skipped,
    })
}

/// Load dialogs without requiring their image files to exist (sampling
/// only needs the conditioning text).
pub fn load_dialogs_unchecked(path: &Path) -> Result<Vec<Dialog>> {
    let file = std::fs::File::open(path)?;
    let mut dialogs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::DataLine {
            line: i + 1,
            msg: format!("malformed record: {e}"),
        })?;
        let cut = raw
            .turns
            .iter()
            .position(|t| t.share_photo == Some(true))
            .unwrap_or(raw.turns.len());
        let dialog = Dialog {
            turns: raw.turns[..cut]
                .iter()
                .map(|t| Turn {
                    speaker: t.speaker,
                    text: t.text.clone(),
                })
                .collect(),
            image_ref: raw.image,
            category: raw.category,
        };
        dialog.validate().map_err(|e| Error::DataLine {
            line: i + 1,
            msg: e.to_string(),
        })?;
        dialogs.push(dialog);
    }
    Ok(dialogs)
}

/// Write dialogs in the JSONL schema (no share_photo markers: all turns
/// already precede the image).
pub fn write_jsonl(path: &Path, dialogs: &[Dialog]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in dialogs {
        let raw = RawRecord {
            turns: d
                .turns
                .iter()
                .map(|t| RawTurn {
                    speaker: t.speaker,
                    text: t.text.clone(),
                    share_photo: None,
                })
                .collect(),
            image: d.image_ref.clone(),
            category: d.category.clone(),
        };
        let line = serde_json::to_string(&raw).map_err(|e| Error::Data(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Split manifest: which sample indices belong to which split, plus the
/// generation seed.
#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    pub fn contiguous(seed: u64, n_train: usize, n_total: usize) -> Self {
        SplitManifest {
            seed,
            train: (0..n_train).collect(),
            test: (n_train..n_total).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
