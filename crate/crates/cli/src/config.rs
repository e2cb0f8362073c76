//! JSON run configuration: file contents, then `--set key=value`
//! overrides, then strict deserialization into the stage's type.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const SUMMARY: &str = "summary.json";

/// Reads `path` (if any) as a JSON object and applies overrides in order.
pub fn load_value(path: Option<&Path>, sets: &[String]) -> Result<Value> {
    let mut v = match path {
        Some(p) => {
            let text = read_text(p)?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !v.is_object() {
        return Err(CliError::Config("configuration must be a JSON object".into()));
    }
    for s in sets {
        apply_set(&mut v, s)?;
    }
    Ok(v)
}

/// `a.b=3` sets `{"a": {"b": 3}}`. Values parse as JSON when they can and
/// are taken as strings otherwise.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("bad --set key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("--set {key}: `{part}` is not an object")))?;
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut()
        .ok_or_else(|| CliError::Config(format!("--set {key}: parent is not an object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn parse<T: DeserializeOwned>(v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load<T: DeserializeOwned>(path: Option<&Path>, sets: &[String]) -> Result<T> {
    parse(load_value(path, sets)?)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

/// Output directory for one run.
pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self(path.to_path_buf()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value).expect("serializable");
        s.push('\n');
        self.write(name, s)
    }

    /// One JSON object per line.
    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let mut s = String::new();
        for r in rows {
            s.push_str(&serde_json::to_string(r).expect("serializable"));
            s.push('\n');
        }
        self.write(name, s)
    }
}
