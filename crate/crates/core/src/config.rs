//! Line-based `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines ignored.
//! Consumers pull typed values out of a [`ConfigMap`]; any key left
//! unconsumed is rejected with its line number, so misspelled keys never
//! pass silently. Command-line overrides are folded in as synthetic
//! entries before consumption.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Entry {
    line: usize, // 0 for overrides
    key: String,
    value: String,
    used: bool,
}

#[derive(Debug, Clone)]
pub struct ConfigMap {
    path: String,
    entries: Vec<Entry>,
}

impl ConfigMap {
    pub fn from_text(text: &str, path: &str) -> Result<ConfigMap> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line,
                msg: format!("expected `key = value`, got {raw:?}"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line,
                    msg: "empty key".into(),
                });
            }
            entries.push(Entry {
                line,
                key: key.to_string(),
                value: value.trim().to_string(),
                used: false,
            });
        }
        Ok(ConfigMap { path: path.to_string(), entries })
    }

    pub fn from_file(path: &Path) -> Result<ConfigMap> {
        let text = std::fs::read_to_string(path)?;
        ConfigMap::from_text(&text, &path.display().to_string())
    }

    pub fn empty(label: &str) -> ConfigMap {
        ConfigMap { path: label.to_string(), entries: Vec::new() }
    }

    /// Fold in `key=value` overrides; an override shadows any file entry
    /// with the same key.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) {
        for (k, v) in pairs {
            for e in &mut self.entries {
                if &e.key == k {
                    e.used = true; // shadowed
                }
            }
            self.entries.push(Entry {
                line: 0,
                key: k.clone(),
                value: v.clone(),
                used: false,
            });
        }
    }

    fn lookup(&mut self, key: &str) -> Option<(usize, String)> {
        let mut found = None;
        for e in &mut self.entries {
            if e.key == key && !e.used {
                e.used = true;
                found = Some((e.line, e.value.clone()));
            }
        }
        found
    }

    /// Typed fetch with a default for absent keys.
    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.lookup(key) {
            None => Ok(default),
            Some((line, v)) => v.parse::<T>().map_err(|e| Error::Parse {
                path: self.path.clone(),
                line,
                msg: format!("key {key}: {e}"),
            }),
        }
    }

    pub fn get_string(&mut self, key: &str, default: &str) -> String {
        match self.lookup(key) {
            None => default.to_string(),
            Some((_, v)) => v,
        }
    }

    /// Comma-separated list of T.
    pub fn get_list<T>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: FromStr + Clone,
        T::Err: Display,
    {
        match self.lookup(key) {
            None => Ok(default.to_vec()),
            Some((line, v)) => v
                .split(',')
                .map(|s| {
                    s.trim().parse::<T>().map_err(|e| Error::Parse {
                        path: self.path.clone(),
                        line,
                        msg: format!("key {key}: bad element {s:?}: {e}"),
                    })
                })
                .collect(),
        }
    }

    /// Fails if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        let unknown: Vec<String> = self
            .entries
            .iter()
            .filter(|e| !e.used)
            .map(|e| {
                if e.line == 0 {
                    format!("{} (command-line override)", e.key)
                } else {
                    format!("{} (line {})", e.key, e.line)
                }
            })
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Parse {
                path: self.path,
                line: self.entries.iter().find(|e| !e.used).map(|e| e.line).unwrap_or(0),
                msg: format!("unknown keys: {}", unknown.join(", ")),
            })
        }
    }
}

/// Parse `--key value --key2 value2 ...` trailing CLI overrides.
pub fn parse_override_pairs(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag.strip_prefix("--").ok_or_else(|| {
            Error::invalid("overrides", format!("expected --key, got {flag:?}"))
        })?;
        let value = it
            .next()
            .ok_or_else(|| Error::invalid("overrides", format!("--{key} is missing a value")))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}
