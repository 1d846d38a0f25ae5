//! Run manifest: one JSON file per command invocation recording everything
//! needed to reproduce it. Timestamps and wall times live only here, never in
//! the CSV artifacts, so repeated runs with the same config and seed produce
//! byte-identical CSVs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use smoothcert::data::Dataset;
use smoothcert::rng::{CHECKSUM_ALGORITHM, RNG_ALGORITHM};

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct DatasetDigest {
    pub role: String,
    pub name: String,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// FNV-1a over the raw bytes, hex.
    pub checksum: String,
}

impl DatasetDigest {
    pub fn of(role: &str, ds: &Dataset) -> DatasetDigest {
        DatasetDigest {
            role: role.to_string(),
            name: ds.name.clone(),
            n: ds.len(),
            dim: ds.dim(),
            classes: ds.num_classes,
            checksum: format!("{:016x}", ds.checksum()),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema: &'static str,
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub rng_algorithm: &'static str,
    pub checksum_algorithm: &'static str,
    /// Effective configuration after `--set` overlays, sorted by key.
    pub config: BTreeMap<String, String>,
    pub datasets: Vec<DatasetDigest>,
    /// File names written into the run directory, in creation order.
    pub artifacts: Vec<String>,
    pub wall_seconds: f64,
    pub timestamp_unix_ms: u128,
    /// Command-specific payload (training history, verify outcomes, ...).
    pub extra: serde_json::Value,
    #[serde(skip)]
    started: Instant,
}

impl RunManifest {
    pub fn begin(command: &str, cfg: &RunConfig, seed: u64, threads: usize) -> RunManifest {
        RunManifest {
            schema: "run-manifest/v1",
            command: command.to_string(),
            seed,
            threads,
            rng_algorithm: RNG_ALGORITHM,
            checksum_algorithm: CHECKSUM_ALGORITHM,
            config: cfg.entries().clone(),
            datasets: Vec::new(),
            artifacts: Vec::new(),
            wall_seconds: 0.0,
            timestamp_unix_ms: 0,
            extra: serde_json::Value::Null,
            started: Instant::now(),
        }
    }

    pub fn dataset(&mut self, role: &str, ds: &Dataset) {
        self.datasets.push(DatasetDigest::of(role, ds));
    }

    pub fn artifact(&mut self, name: &str) {
        self.artifacts.push(name.to_string());
    }

    /// Stamp times and write `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> std::io::Result<()> {
        self.wall_seconds = self.started.elapsed().as_secs_f64();
        self.timestamp_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        self.artifacts.push("manifest.json".to_string());
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), json)
    }
}
