//! Output directory bookkeeping: stage logs, config-hash stamps and
//! upstream checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
}

/// Machine-readable run log, one per stage, at `logs/<stage>.toml`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub elapsed_ms: u64,
    pub outputs: Vec<OutputRecord>,
}

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub hash: String,
    started: Instant,
    outputs: Vec<PathBuf>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Ctx {
    pub fn new(cfg: PipelineConfig) -> Self {
        let hash = cfg.hash();
        Self {
            cfg,
            hash,
            started: Instant::now(),
            outputs: Vec::new(),
        }
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.cfg.paths.out_dir.join(rel)
    }

    pub fn data(&self, rel: &str) -> PathBuf {
        self.cfg.paths.data_root.join(rel)
    }

    pub fn stamp(&self) -> String {
        format!("voxface {VERSION} config_hash={} seed={}", self.hash, self.cfg.seed)
    }

    fn log_path(&self, stage: &str) -> PathBuf {
        self.out(&format!("logs/{stage}.toml"))
    }

    pub fn ensure_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
    }

    /// Write a text artifact with a leading `# <stamp>` line.
    pub fn write_text(&mut self, path: &Path, body: &str) -> Result<()> {
        if let Some(parent) = path.parent() {
            self.ensure_dir(parent)?;
        }
        let text = format!("# {}\n{body}", self.stamp());
        fs::write(path, text).map_err(|e| CliError::io(path, e))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    /// Prefix an already written text file with the stamp line.
    pub fn stamp_file(&mut self, path: &Path) -> Result<()> {
        let body = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.write_text(path, &body)
    }

    /// Record a file written by other means (binary formats).
    pub fn record(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Check that `stage` ran under the current config.
    pub fn require_stage(&self, stage: &'static str) -> Result<StageLog> {
        let path = self.log_path(stage);
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                what: "stage log",
                path,
                stage,
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let log: StageLog = toml::from_str(&text).map_err(|e| CliError::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        if log.config_hash != self.hash {
            return Err(CliError::ConfigMismatch {
                stage,
                found: log.config_hash,
                expected: self.hash.clone(),
            });
        }
        Ok(log)
    }

    /// The dataset is either external or produced by `synth`; only in the
    /// latter case is its config hash checked.
    pub fn require_data(&self) -> Result<()> {
        if self.log_path("synth").exists() {
            self.require_stage("synth")?;
        }
        Ok(())
    }

    pub fn require_file(&self, path: &Path, what: &'static str, stage: &'static str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::MissingArtifact {
                what,
                path: path.to_path_buf(),
                stage,
            })
        }
    }

    /// Write the stage log listing every recorded output.
    pub fn finish(self, stage: &str) -> Result<StageLog> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for p in &self.outputs {
            outputs.push(OutputRecord {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            });
        }
        let log = StageLog {
            stage: stage.to_string(),
            version: VERSION.to_string(),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            elapsed_ms: self.started.elapsed().as_millis() as u64,
            outputs,
        };
        let path = self.log_path(stage);
        self.ensure_dir(path.parent().unwrap())?;
        let text = toml::to_string(&log).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(log)
    }
}
