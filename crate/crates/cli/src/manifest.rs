use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use ssda_core::datasets::sha256_file;
use ssda_core::TrainConfig;

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

/// Record of one command invocation: what it ran with and what it wrote.
#[derive(Debug, Serialize)]
pub struct ExperimentManifest {
    pub tool_version: &'static str,
    pub command: Vec<String>,
    pub config: Option<TrainConfig>,
    pub split_checksum: Option<String>,
    pub artifacts: Vec<Artifact>,
    pub timings: Vec<Timing>,
}

impl ExperimentManifest {
    pub fn new(config: Option<&TrainConfig>, split_checksum: Option<String>) -> Self {
        ExperimentManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: std::env::args().collect(),
            config: config.cloned(),
            split_checksum,
            artifacts: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn register(&mut self, path: &Path) -> anyhow::Result<()> {
        self.artifacts.push(Artifact {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push(Timing {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join("experiment.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| ssda_core::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}
