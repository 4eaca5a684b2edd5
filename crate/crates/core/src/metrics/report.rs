//! Evaluation report: JSON document plus a CSV row layout.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct CategoryMetrics {
    pub fid: f64,
    pub is_mean: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub n_real: usize,
    pub n_gen: usize,
    pub extractor_checkpoint: String,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        if !(self.fid >= -1e-8) {
            return Err(Error::Numerical(format!("fid {} out of range", self.fid)));
        }
        if !(self.is_mean >= 1.0 - 1e-8) {
            return Err(Error::Numerical(format!(
                "is_mean {} out of range",
                self.is_mean
            )));
        }
        if !(self.is_std >= 0.0) {
            return Err(Error::Numerical(format!(
                "is_std {} out of range",
                self.is_std
            )));
        }
        for (cat, m) in &self.per_category {
            if !(m.fid >= -1e-8) || !(m.is_mean >= 1.0 - 1e-8) {
                return Err(Error::Numerical(format!(
                    "category {cat} metrics out of range"
                )));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s =
            serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// One table row: model, variant, FID, IS.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub model: String,
    pub variant: String,
    pub fid: f64,
    pub is: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let mut s = String::from("model,variant,fid,is\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6}\n", r.model, r.variant, r.fid, r.is));
    }
    std::fs::write(path, s)?;
    Ok(())
}
