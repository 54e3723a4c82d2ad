use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::LoadedConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance record written next to every pipeline's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub subtype: String,
    pub seed: Option<u64>,
    pub config_path: Option<String>,
    pub config_sha256: Option<String>,
    pub started_at: String,
    pub finished_at: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Key results; identical for identical configuration, data and seed.
    pub results: BTreeMap<String, Value>,
}

/// Collects outputs and results while a pipeline runs.
pub struct Run {
    command: &'static str,
    subtype: String,
    seed: Option<u64>,
    config: Option<LoadedConfig>,
    out_dir: PathBuf,
    started_at: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    results: BTreeMap<String, Value>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl Run {
    pub fn start(
        command: &'static str,
        subtype: impl Into<String>,
        seed: Option<u64>,
        config: Option<LoadedConfig>,
        out_dir: &Path,
    ) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
        Ok(Self {
            command,
            subtype: subtype.into(),
            seed,
            config,
            out_dir: out_dir.to_path_buf(),
            started_at: now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            results: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn result(&mut self, key: &str, value: impl Into<Value>) {
        self.results.insert(key.to_string(), value.into());
    }

    /// Writes `bytes` to `name` inside the output directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(path.display().to_string());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Runs a writer from the core library into an in-memory buffer first,
    /// so a failed export leaves no partial file behind.
    pub fn write_with(
        &mut self,
        name: &str,
        export: impl FnOnce(&mut Vec<u8>) -> photocal_core::Result<()>,
    ) -> Result<PathBuf> {
        let mut buf = Vec::new();
        export(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn write_rows<S: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = S>) -> Result<PathBuf> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        for row in rows {
            wtr.serialize(row).map_err(|e| CliError::Data(e.to_string()))?;
        }
        let bytes = wtr.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
        self.write(name, &bytes)
    }

    /// Writes the manifest after checking that every listed output exists.
    pub fn finish(mut self) -> Result<RunManifest> {
        if let Some(missing) = self.outputs.iter().find(|p| !Path::new(p).is_file()) {
            return Err(CliError::io(missing, std::io::Error::new(std::io::ErrorKind::NotFound, "output vanished")));
        }
        let manifest_path = self.out_dir.join(MANIFEST_FILE);
        self.outputs.push(manifest_path.display().to_string());
        let manifest = RunManifest {
            tool: "photocal".into(),
            version: TOOL_VERSION.into(),
            command: self.command.into(),
            subtype: self.subtype,
            seed: self.seed,
            config_path: self.config.as_ref().map(|c| c.path.display().to_string()),
            config_sha256: self.config.as_ref().map(|c| c.sha256.clone()),
            started_at: self.started_at,
            finished_at: now(),
            inputs: self.inputs,
            outputs: self.outputs,
            results: self.results,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
        bytes.push(b'\n');
        fs::write(&manifest_path, bytes).map_err(|e| CliError::io(&manifest_path, e))?;
        Ok(manifest)
    }
}
