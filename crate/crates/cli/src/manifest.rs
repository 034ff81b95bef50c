//! Run manifests and output writing.
//!
//! JSON outputs embed the manifest under a `"manifest"` key; JSON-lines
//! outputs start with a `{"manifest": ...}` line; binary outputs and plain
//! data files get a `<file>.manifest.json` sidecar. Every file goes through
//! a temporary file and a rename, so a failed run leaves no partial output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use vpr_core::format::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub params: Value,
    pub parallelism: usize,
}

impl RunManifest {
    pub fn new(subcommand: &str, params: &impl Serialize, parallelism: usize) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            subcommand: subcommand.to_owned(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            params: serde_json::to_value(params)?,
            parallelism,
        })
    }

    pub fn input(mut self, role: &str, path: &Path) -> Self {
        self.inputs.insert(role.to_owned(), path.to_owned());
        self
    }

    pub fn output(mut self, role: &str, path: &Path) -> Self {
        self.outputs.insert(role.to_owned(), path.to_owned());
        self
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes `bytes` and a manifest sidecar next to it.
pub fn write_with_sidecar(path: &Path, bytes: &[u8], manifest: &RunManifest) -> Result<()> {
    write(path, bytes)?;
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    write(&sidecar_path(path), text.as_bytes())
}

/// Writes `{"manifest": ..., <body fields>}` as pretty JSON. `body` must
/// serialize to an object.
pub fn write_json(path: &Path, manifest: &RunManifest, body: &impl Serialize) -> Result<()> {
    let mut obj = serde_json::Map::new();
    obj.insert("manifest".into(), serde_json::to_value(manifest)?);
    match serde_json::to_value(body)? {
        Value::Object(fields) => obj.extend(fields),
        other => {
            obj.insert("data".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(obj))?;
    text.push('\n');
    write(path, text.as_bytes())
}

/// Writes a manifest line followed by one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, manifest: &RunManifest, records: &[T]) -> Result<()> {
    let mut text = serde_json::to_string(&serde_json::json!({ "manifest": manifest }))?;
    text.push('\n');
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write(path, text.as_bytes())
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
    write(path, &bytes)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text.as_bytes())
}
