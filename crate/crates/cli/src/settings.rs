//! Merging of `--config` files with command-line flags.
//!
//! A config file is a JSON object whose keys are the long flag names with
//! `-` replaced by `_`. Flags that were given replace the file values.
//! Relative paths in the file are taken relative to the file's directory.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::Failure;

#[derive(Debug, Default, Clone)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub output: Option<PathBuf>,
}

/// Keys of one command: which globals it takes and which keys hold paths.
pub struct Keys {
    pub globals: &'static [&'static str],
    pub paths: &'static [&'static str],
}

fn load_config(path: &Path, paths: &[&str]) -> Result<Map<String, Value>, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
    let Value::Object(mut map) = value else {
        return Err(Failure::usage(format!("config {}: top level must be an object", path.display())));
    };
    let base = path.parent().unwrap_or(Path::new(""));
    for key in paths {
        if let Some(Value::String(s)) = map.get(*key) {
            let p = Path::new(s);
            if p.is_relative() {
                let joined = base.join(p).display().to_string();
                map.insert((*key).to_string(), Value::String(joined));
            }
        }
    }
    Ok(map)
}

/// Builds the settings of one command. `flags` holds the command's own
/// flags; null entries mean "not given".
pub fn resolve<T: DeserializeOwned>(globals: &Globals, keys: &Keys, flags: Value) -> Result<T, Failure> {
    let mut map = match &globals.config {
        Some(p) => load_config(p, keys.paths)?,
        None => Map::new(),
    };
    let given = [
        ("seed", globals.seed.map(Value::from)),
        ("jobs", globals.jobs.map(Value::from)),
        ("output", globals.output.as_ref().map(|p| Value::from(p.display().to_string()))),
    ];
    for (key, value) in given {
        let Some(value) = value else { continue };
        if keys.globals.contains(&key) {
            map.insert(key.into(), value);
        } else {
            log::warn!("--{key} has no effect on this command");
        }
    }
    if let Value::Object(flags) = flags {
        for (k, v) in flags {
            if !v.is_null() {
                map.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| Failure::usage(format!("settings: {e}")))
}
