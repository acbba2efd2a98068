//! Plain `key=value` configuration: a per-subcommand key schema with
//! defaults, optionally overlaid by a config file and then by `--set`
//! flags (flags win). Unknown keys are hard errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::AppError;

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        default,
        help,
    }
}

/// Resolved configuration for one subcommand run.
#[derive(Debug, Clone)]
pub struct Resolved {
    values: BTreeMap<String, String>,
}

impl Resolved {
    pub fn load(
        schema: &[KeySpec],
        config_file: Option<&Path>,
        sets: &[String],
    ) -> Result<Resolved, AppError> {
        let mut values: BTreeMap<String, String> = schema
            .iter()
            .map(|k| (k.name.to_string(), k.default.to_string()))
            .collect();
        let known = |name: &str| schema.iter().any(|k| k.name == name);

        if let Some(path) = config_file {
            let text = fs::read_to_string(path)
                .map_err(|e| AppError::usage(format!("config file {}: {e}", path.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    AppError::usage(format!(
                        "config file {} line {}: expected key=value, got {line:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                let (k, v) = (k.trim(), v.trim());
                if !known(k) {
                    return Err(AppError::usage(format!(
                        "config file {} line {}: unknown key {k:?}",
                        path.display(),
                        lineno + 1
                    )));
                }
                values.insert(k.to_string(), v.to_string());
            }
        }

        for set in sets {
            let (k, v) = set.split_once('=').ok_or_else(|| {
                AppError::usage(format!("--set expects key=value, got {set:?}"))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !known(k) {
                return Err(AppError::usage(format!("unknown key {k:?} in --set")));
            }
            values.insert(k.to_string(), v.to_string());
        }

        Ok(Resolved { values })
    }

    pub fn str(&self, name: &str) -> &str {
        self.values
            .get(name)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key {name} missing from schema"))
    }

    pub fn required_path(&self, name: &str) -> Result<PathBuf, AppError> {
        let v = self.str(name);
        if v.is_empty() {
            return Err(AppError::usage(format!("key {name} is required")));
        }
        Ok(PathBuf::from(v))
    }

    pub fn optional_path(&self, name: &str) -> Option<PathBuf> {
        let v = self.str(name);
        if v.is_empty() {
            None
        } else {
            Some(PathBuf::from(v))
        }
    }

    pub fn usize(&self, name: &str) -> Result<usize, AppError> {
        self.str(name)
            .parse()
            .map_err(|_| AppError::usage(format!("key {name}: expected an integer, got {:?}", self.str(name))))
    }

    pub fn u64(&self, name: &str) -> Result<u64, AppError> {
        self.str(name)
            .parse()
            .map_err(|_| AppError::usage(format!("key {name}: expected an integer, got {:?}", self.str(name))))
    }

    pub fn f64(&self, name: &str) -> Result<f64, AppError> {
        self.str(name)
            .parse()
            .map_err(|_| AppError::usage(format!("key {name}: expected a number, got {:?}", self.str(name))))
    }

    pub fn f32(&self, name: &str) -> Result<f32, AppError> {
        self.str(name)
            .parse()
            .map_err(|_| AppError::usage(format!("key {name}: expected a number, got {:?}", self.str(name))))
    }

    pub fn bool(&self, name: &str) -> Result<bool, AppError> {
        match self.str(name) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(AppError::usage(format!(
                "key {name}: expected true/false, got {other:?}"
            ))),
        }
    }

    pub fn list(&self, name: &str) -> Vec<String> {
        self.str(name)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// The fully resolved configuration, one sorted `key=value` per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// Help text block listing every key with its default.
pub fn describe(schema: &[KeySpec]) -> String {
    let mut out = String::from("configuration keys (config file or --set key=value):\n");
    for k in schema {
        let _ = writeln!(
            out,
            "  {:<18} {}  [default: {}]",
            k.name,
            k.help,
            if k.default.is_empty() { "<required>" } else { k.default }
        );
    }
    out
}
