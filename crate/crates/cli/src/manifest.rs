use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Record of one command run. Timings vary between runs; everything else is
/// a function of the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub artifacts: Vec<Artifact>,
    pub timings: Vec<StageTiming>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects stage timings and written files while a command runs.
pub struct Recorder {
    command: String,
    out_dir: PathBuf,
    files: Vec<PathBuf>,
    timings: Vec<StageTiming>,
}

impl Recorder {
    pub fn new(command: &str, out_dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Self { command: command.to_string(), out_dir: out_dir.to_path_buf(), files: Vec::new(), timings: Vec::new() })
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
        let start = Instant::now();
        log::info!("stage {name}");
        let out = f().map_err(|e| e.in_stage(name))?;
        self.timings.push(StageTiming { stage: name.to_string(), seconds: start.elapsed().as_secs_f64() });
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Writes a file through `f` and registers it as an artifact.
    pub fn write(&mut self, name: &str, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<(), CliError>) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        f(&mut w)?;
        std::io::Write::flush(&mut w)?;
        self.files.push(path.clone());
        Ok(path)
    }

    /// Hashes every artifact and writes `manifest.json`.
    pub fn finish(self, config: &ExperimentConfig) -> Result<RunManifest, CliError> {
        let mut artifacts = Vec::new();
        for f in &self.files {
            artifacts.push(Artifact {
                path: f.file_name().expect("file name").to_string_lossy().into_owned(),
                sha256: sha256_file(f)?,
                bytes: std::fs::metadata(f)?.len(),
            });
        }
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            artifacts,
            timings: self.timings,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(self.out_dir.join("manifest.json"), text + "\n")?;
        Ok(manifest)
    }
}

/// Checks every hash listed in a manifest against the files next to it.
pub fn verify(manifest_path: &Path) -> Result<bool, CliError> {
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    for a in &manifest.artifacts {
        if sha256_file(&dir.join(&a.path))? != a.sha256 {
            return Ok(false);
        }
    }
    Ok(true)
}
