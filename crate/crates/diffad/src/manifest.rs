use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StageSeeds};
use crate::error::{CliError, Result};
use crate::fsutil::{display_rel, file_sha256, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTiming {
    pub id: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce and audit one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config: RunConfig,
    pub master_seed: u64,
    pub seeds: StageSeeds,
    pub threads: usize,
    pub inputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
    pub stage_seconds: Vec<StageTiming>,
    pub per_image_seconds: Vec<ImageTiming>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig, threads: usize) -> Self {
        RunManifest {
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            master_seed: cfg.seed,
            seeds: cfg.stage_seeds(),
            threads,
            inputs: BTreeMap::new(),
            counts: BTreeMap::new(),
            warnings: Vec::new(),
            stage_seconds: Vec::new(),
            per_image_seconds: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.display().to_string());
    }

    pub fn count(&mut self, name: &str, n: u64) {
        self.counts.insert(name.into(), n);
    }

    pub fn record_stage(&mut self, stage: &str, start: Instant) {
        self.stage_seconds.push(StageTiming {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    /// Runs `f`, recording its wall time under `stage`.
    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.record_stage(stage, start);
        Ok(out)
    }

    pub fn artifact(&mut self, out_dir: &Path, path: &Path) -> Result<()> {
        self.artifacts.push(Artifact {
            path: display_rel(path, out_dir),
            sha256: file_sha256(path)?,
        });
        Ok(())
    }

    pub fn file_name(command: &str) -> String {
        format!("manifest-{command}.json")
    }

    /// Writes `manifest-<command>.json` into `out_dir` atomically.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(Self::file_name(&self.command));
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| CliError::format(&path, e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::format(path, e.to_string()))
    }
}
