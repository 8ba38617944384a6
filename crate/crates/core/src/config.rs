//! Flat `key=value` configuration text, used for config files, CLI
//! overrides and the effective-config echo written next to outputs.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{FlowError, Result};

/// Ordered key=value map. Unknown keys are detected by consumers via
/// [`KvMap::finish`], which errors on any key never read.
#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
    read: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse `key=value` lines; '#' starts a comment, blank lines skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(FlowError::Format(format!(
                    "line {}: expected key=value, got {:?}",
                    lineno + 1,
                    raw
                )));
            };
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvMap {
            entries,
            read: Default::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    /// Apply `key=value` override strings on top of the file contents.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                return Err(FlowError::Config(format!(
                    "override {:?} is not key=value",
                    o
                )));
            };
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        if self.entries.contains_key(key) {
            self.read.borrow_mut().insert(key.to_string());
        }
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                FlowError::Config(format!("cannot parse {}={:?}", key, v))
            }),
        }
    }

    pub fn get_bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(FlowError::Config(format!(
                "cannot parse {}={:?} as bool",
                key, v
            ))),
        }
    }

    /// Error out if the map holds keys nobody consumed.
    pub fn finish(&self) -> Result<()> {
        let read = self.read.borrow();
        let unknown: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| !read.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(FlowError::Config(format!(
                "unknown config keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }

    /// Render as sorted `key=value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}
