//! Run manifests and the `.partial` marker.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use atd_core::config::RunConfig;
use atd_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const PARTIAL_MARKER: &str = ".partial";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub data: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Prepares `out`: refuses a non-empty directory unless `force`, in which case
/// the old contents are removed.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = out.is_file() || std::fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!("{} exists; pass --force to overwrite", out.display())));
        }
        if non_empty {
            if out.is_file() {
                std::fs::remove_file(out)?;
            } else {
                std::fs::remove_dir_all(out)?;
            }
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// An in-progress run: the manifest and a `.partial` marker are on disk until
/// [`RunGuard::finish`] is called.
pub struct RunGuard {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunGuard {
    pub fn start(
        dir: &Path,
        command: &str,
        args: Vec<String>,
        config: &RunConfig,
        inputs: Vec<PathBuf>,
    ) -> Result<Self> {
        let manifest = RunManifest {
            command: command.to_string(),
            args,
            config: config.clone(),
            seeds: Seeds { train: config.train.seed, data: config.data.seed },
            inputs,
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: now(),
            finished_unix: None,
        };
        let guard = Self { dir: dir.to_path_buf(), manifest };
        guard.write()?;
        std::fs::write(dir.join(PARTIAL_MARKER), "")?;
        std::fs::write(dir.join(RESOLVED_CONFIG_FILE), config.to_toml_string())?;
        Ok(guard)
    }

    fn write(&self) -> Result<()> {
        std::fs::write(self.dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.manifest.outputs.push(path.into());
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_unix = Some(now());
        self.write()?;
        std::fs::remove_file(self.dir.join(PARTIAL_MARKER))?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
}
