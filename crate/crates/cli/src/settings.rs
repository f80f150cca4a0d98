//! Flat `key=value` settings: built-in defaults, overridden by an optional
//! config file, overridden by command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Bad flags, unknown keys, unparsable values. Maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

/// One key of a command's schema and its built-in default.
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
}

pub const fn key(name: &'static str, default: &'static str) -> Key {
    Key { name, default }
}

#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<&'static str, (String, Source)>,
}

impl Settings {
    pub fn new(schema: &[Key]) -> Self {
        Self {
            values: schema
                .iter()
                .map(|k| (k.name, (k.default.to_string(), Source::Default)))
                .collect(),
        }
    }

    fn slot(&mut self, name: &str) -> anyhow::Result<&mut (String, Source)> {
        let known = self.values.keys().copied().collect::<Vec<_>>().join(", ");
        self.values
            .iter_mut()
            .find(|(k, _)| **k == name)
            .map(|(_, v)| v)
            .ok_or_else(|| usage(format!("unknown setting '{name}' (known: {known})")))
    }

    /// Applies a config file. Lines are `key = value`; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                usage(format!(
                    "{}:{}: expected key=value, got '{raw}'",
                    path.display(),
                    no + 1
                ))
            })?;
            let slot = self
                .slot(k.trim())
                .map_err(|e| usage(format!("{}:{}: {e}", path.display(), no + 1)))?;
            *slot = (v.trim().to_string(), Source::File);
        }
        Ok(())
    }

    pub fn apply_flag(&mut self, name: &str, value: Option<String>) -> anyhow::Result<()> {
        if let Some(v) = value {
            *self.slot(name)? = (v, Source::Flag);
        }
        Ok(())
    }

    pub fn raw(&self, name: &str) -> &str {
        &self
            .values
            .get(name)
            .unwrap_or_else(|| panic!("'{name}' is not in the schema"))
            .0
    }

    pub fn source(&self, name: &str) -> Source {
        self.values[name].1
    }

    pub fn get<T: FromStr>(&self, name: &str) -> anyhow::Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(name);
        raw.parse()
            .map_err(|e| usage(format!("invalid value '{raw}' for {name}: {e}")))
    }

    pub fn flag(&self, name: &str) -> anyhow::Result<bool> {
        match self.raw(name) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(usage(format!(
                "invalid value '{other}' for {name}: expected true or false"
            ))),
        }
    }

    /// Empty string means "not set".
    pub fn optional<T: FromStr>(&self, name: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if self.raw(name).is_empty() {
            Ok(None)
        } else {
            self.get(name).map(Some)
        }
    }

    /// All `key=value` pairs, sorted by key. Non-default values are tagged
    /// with where they came from.
    pub fn dump(&self) -> String {
        self.values
            .keys()
            .map(|k| match self.source(k) {
                Source::Default => format!("{k}={}\n", self.raw(k)),
                Source::File => format!("{k}={} # file\n", self.raw(k)),
                Source::Flag => format!("{k}={} # flag\n", self.raw(k)),
            })
            .collect()
    }
}
