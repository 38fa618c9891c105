//! Artifact writing. Every file is written to a temporary sibling and
//! renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::CliError;

/// Identifies the run that produced an artifact.
#[derive(Clone, Debug)]
pub struct Provenance {
    pub command: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl Provenance {
    pub fn new(command: &'static str, config: &RunConfig) -> Self {
        Self {
            command,
            config_hash: config.hash(),
            seed: config.seed,
            config: config.clone(),
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "tool": "sepbart",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "config": self.config,
        })
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

/// Writes through `write` into a temporary file, then renames it to `path`.
pub fn atomic<F>(path: &Path, write: F) -> Result<(), CliError>
where
    F: FnOnce(&Path) -> Result<(), CliError>,
{
    let tmp = temp_path(path);
    let res = write(&tmp).and_then(|_| fs::rename(&tmp, path).map_err(|e| CliError::io(path, e)));
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Pretty JSON with the provenance record under `"provenance"`.
pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, body: &T) -> Result<(), CliError> {
    let mut value = serde_json::to_value(body).map_err(|e| CliError::Runtime(e.to_string()))?;
    match &mut value {
        Value::Object(map) => {
            map.insert("provenance".into(), prov.to_json());
        }
        other => {
            value = json!({ "provenance": prov.to_json(), "result": other.take() });
        }
    }
    let mut text = serde_json::to_string_pretty(&value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    atomic(path, |tmp| fs::write(tmp, &text).map_err(|e| CliError::io(tmp, e)))
}

/// CSV with `config_hash` and `seed` columns appended to every row.
pub fn write_csv(
    path: &Path,
    prov: &Provenance,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), CliError> {
    atomic(path, |tmp| {
        let mut w = csv::Writer::from_path(tmp).map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut h = header.to_vec();
        h.push("config_hash".into());
        h.push("seed".into());
        w.write_record(&h).map_err(|e| CliError::Runtime(e.to_string()))?;
        for mut r in rows {
            r.push(prov.config_hash.clone());
            r.push(prov.seed.to_string());
            w.write_record(&r).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::io(tmp, e))
    })
}

/// Shortest round-trip text of a float.
pub fn num(v: f64) -> String {
    v.to_string()
}
