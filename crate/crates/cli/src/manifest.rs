use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliResult;
use motlm_core::distrib::SCHEMA_VERSION;

/// Audit record written next to every artifact a command produces.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file, keyed by the path as given.
    pub input_hashes: BTreeMap<String, String>,
    pub tool_version: String,
    pub started_unix_seconds: u64,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            manifest: RunManifest {
                schema_version: SCHEMA_VERSION,
                command: command.to_owned(),
                argv: std::env::args().collect(),
                config: serde_json::Value::Null,
                seeds: BTreeMap::new(),
                input_hashes: BTreeMap::new(),
                tool_version: env!("CARGO_PKG_VERSION").to_owned(),
                started_unix_seconds: started,
                wall_clock_seconds: 0.0,
                outputs: vec![],
                summary: serde_json::Value::Null,
            },
            clock: Instant::now(),
        }
    }

    pub fn config(&mut self, value: impl Serialize) -> CliResult<()> {
        self.manifest.config = serde_json::to_value(value)?;
        Ok(())
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.to_owned(), value);
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path)
            .map_err(|e| crate::error::CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        self.manifest.input_hashes.insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn summary(&mut self, value: impl Serialize) -> CliResult<()> {
        self.manifest.summary = serde_json::to_value(value)?;
        Ok(())
    }

    /// Writes the manifest to `path` and returns it.
    pub fn finish(mut self, path: &Path) -> CliResult<PathBuf> {
        self.manifest.wall_clock_seconds = self.clock.elapsed().as_secs_f64();
        write_text(path, &serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(path.to_path_buf())
    }
}

/// `<path>.manifest.json` unless an explicit location is given.
pub fn manifest_path(primary: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(primary, ".manifest.json"))
}

/// Appends `suffix` to the full file name.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
