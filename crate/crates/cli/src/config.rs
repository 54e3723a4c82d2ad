//! Configuration loading: TOML by default, JSON for `.json` files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// A parsed configuration file with the hash of its raw bytes.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub sha256: String,
    pub value: Value,
}

pub fn load(path: &Path) -> Result<LoadedConfig> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Config(format!("{} is not valid UTF-8", path.display())))?;
    let value: Value = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    if !value.is_object() {
        return Err(CliError::Config(format!("{}: top level must be a table", path.display())));
    }
    Ok(LoadedConfig { path: path.to_path_buf(), sha256: hex::encode(Sha256::digest(&bytes)), value })
}

impl LoadedConfig {
    /// Deserializes the whole file, reporting the offending field path.
    pub fn parse<T: DeserializeOwned>(&self) -> Result<T> {
        parse_value(&self.value, &self.path)
    }

    /// As [`parse`](Self::parse) after setting `seed` inside `table` (or at
    /// the top level). The command-line seed overrides one in the file.
    pub fn parse_seeded<T: DeserializeOwned>(&self, table: Option<&str>, seed: u64) -> Result<T> {
        let mut value = self.value.clone();
        let target = match table {
            Some(name) => value
                .get_mut(name)
                .filter(|v| v.is_object())
                .ok_or_else(|| CliError::Config(format!("{}: missing table `{name}`", self.path.display())))?,
            None => &mut value,
        };
        let map = target.as_object_mut().expect("checked to be a table");
        if let Some(old) = map.insert("seed".into(), seed.into()) {
            if old != Value::from(seed) {
                log::warn!("seed {old} in {} replaced by --seed {seed}", self.path.display());
            }
        }
        parse_value(&value, &self.path)
    }

    pub fn has_key(&self, key: &str) -> bool {
        self.value.get(key).is_some()
    }
}

fn parse_value<T: DeserializeOwned>(value: &Value, path: &Path) -> Result<T> {
    serde_path_to_error::deserialize(value.clone()).map_err(|e| {
        let field = e.path().to_string();
        CliError::Config(format!("{}: field `{field}`: {}", path.display(), e.into_inner()))
    })
}

/// Reads a JSON data file into `T`; shape problems are data errors.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut de = serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| {
        let field = e.path().to_string();
        CliError::Data(format!("{}: field `{field}`: {}", path.display(), e.into_inner()))
    })
}
