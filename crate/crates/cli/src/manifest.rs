//! Run manifests: written into the output directory before work starts,
//! immutable afterward. A manifest plus the code version fully determines
//! every artifact the run produces.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

#[derive(Serialize)]
pub struct RunManifest<C: Serialize> {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: C,
    pub created_unix: u64,
    pub outputs: BTreeMap<String, String>,
}

impl<C: Serialize> RunManifest<C> {
    pub fn new(command: &str, seed: u64, config: C) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outputs: BTreeMap::new(),
        }
    }

    pub fn output(mut self, key: &str, value: impl Into<String>) -> Self {
        self.outputs.insert(key.to_string(), value.into());
        self
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("manifest.json"), s)?;
        Ok(())
    }
}
