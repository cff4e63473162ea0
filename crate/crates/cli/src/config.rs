//! Config-file handling. Each subcommand reads the table of the same name
//! from an optional TOML file; command-line flags override its keys.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Parsed config file, or an empty one.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub path: Option<String>,
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let root = match serde_json::to_value(table)? {
            Value::Object(m) => m,
            _ => unreachable!("a TOML table is an object"),
        };
        for (key, value) in &root {
            let known = matches!(key.as_str(), "threads" | "synth" | "align" | "train" | "render" | "eval");
            if !known {
                bail!("config {}: unknown key '{key}'", path.display());
            }
            if key != "threads" && !value.is_object() {
                bail!("config {}: '{key}' must be a table", path.display());
            }
        }
        Ok(ConfigFile {
            path: Some(path.display().to_string()),
            root,
        })
    }

    pub fn threads(&self) -> Result<Option<usize>> {
        match self.root.get("threads") {
            None => Ok(None),
            Some(v) => Ok(Some(serde_json::from_value(v.clone()).context("config key 'threads'")?)),
        }
    }

    pub fn section(&self, name: &str) -> Map<String, Value> {
        match self.root.get(name) {
            Some(Value::Object(m)) => m.clone(),
            _ => Map::new(),
        }
    }
}

/// Options after merging: the config section, the flags given on the
/// command line, and the combination of both.
pub struct Merged<T> {
    pub from_file: Map<String, Value>,
    pub from_flags: Map<String, Value>,
    pub options: T,
}

/// Overlays the flags (unset fields skipped) on the config section and
/// deserializes the result. Unknown config keys are rejected.
pub fn merge<T: Serialize + DeserializeOwned>(file: &ConfigFile, section: &str, flags: &T) -> Result<Merged<T>> {
    let from_file = file.section(section);
    let from_flags = match serde_json::to_value(flags)? {
        Value::Object(m) => m.into_iter().filter(|(_, v)| !v.is_null()).collect::<Map<_, _>>(),
        _ => unreachable!("options serialize to an object"),
    };
    let mut combined = from_file.clone();
    for (k, v) in &from_flags {
        combined.insert(k.clone(), v.clone());
    }
    let options = serde_json::from_value(Value::Object(combined))
        .with_context(|| format!("invalid [{section}] options"))?;
    Ok(Merged {
        from_file,
        from_flags,
        options,
    })
}
