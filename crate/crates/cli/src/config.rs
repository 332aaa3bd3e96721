//! `--config FILE` support. The file is a JSON object whose keys are long
//! flag names (`per_class` or `per-class`); a nested object keyed by the
//! subcommand name takes precedence over top-level keys. Values are spliced
//! into argv right after the subcommand, ahead of the user's own flags, so
//! explicit flags win.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            return Some(rest.into());
        }
    }
    None
}

/// Index of the subcommand token: the first positional argument.
fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            i += 2;
        } else if a.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

fn flags_from(section: &Map<String, Value>) -> Result<Vec<OsString>, String> {
    let mut out = Vec::new();
    for (key, value) in section {
        if value.is_object() {
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &Value| -> Result<String, String> {
            match v {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                other => Err(format!("config key {key}: unsupported value {other}")),
            }
        };
        match value {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => out.push(flag.into()),
            Value::Array(items) => {
                for v in items {
                    out.push(flag.clone().into());
                    out.push(scalar(v)?.into());
                }
            }
            v => {
                out.push(flag.into());
                out.push(scalar(v)?.into());
            }
        }
    }
    Ok(out)
}

/// Returns argv with the config file's values spliced in.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| format!("config {} is not valid JSON: {e}", path.display()))?;
    let Value::Object(root) = value else {
        return Err(format!("config {} must be a JSON object", path.display()));
    };
    let Some(at) = subcommand_index(&args) else {
        return Ok(args);
    };
    let name = args[at].to_string_lossy().into_owned();
    let mut flags = flags_from(&root)?;
    if let Some(Value::Object(section)) = root.get(&name) {
        flags.extend(flags_from(section)?);
    }
    let mut out = args[..=at].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}
