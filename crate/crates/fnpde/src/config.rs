//! Flat `key = value` run configuration. Keys are dotted lowercase paths,
//! one assignment per line, `#` starts a comment. Reads are tracked so a
//! run can fail fast on keys it never understood, and the canonical
//! serialization re-parses to the same map.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;

use crate::{Error, Result};

/// Parsed configuration with read tracking.
#[derive(Debug, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.')
        && !key.starts_with('.')
        && !key.ends_with('.')
}

impl ConfigMap {
    /// Parses a configuration document, rejecting malformed lines and
    /// duplicate keys with their line numbers.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {lineno}: expected `key = value`, got `{line}`"
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !valid_key(key) {
                return Err(Error::Config(format!(
                    "line {lineno}: `{key}` is not a valid key; use dotted lowercase \
                     identifiers"
                )));
            }
            if value.is_empty() {
                return Err(Error::Config(format!(
                    "line {lineno}: key `{key}` has an empty value"
                )));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {lineno}: key `{key}` is assigned more than once"
                )));
            }
        }
        Ok(Self {
            entries,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    /// Number of stored assignments.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Inserts or replaces a value; used to stamp resolved defaults before
    /// the map is serialized alongside results.
    pub fn set(&mut self, key: &str, value: impl Display) -> Result<()> {
        if !valid_key(key) {
            return Err(Error::Config(format!("`{key}` is not a valid key")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn mark(&self, key: &str) {
        self.used.borrow_mut().insert(key.to_string());
    }

    /// Raw value lookup; marks the key as understood.
    pub fn get_str(&self, key: &str) -> Option<String> {
        self.mark(key);
        self.entries.get(key).cloned()
    }

    pub fn require_str(&self, key: &str) -> Result<String> {
        self.get_str(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, value: &str, what: &str) -> Result<T> {
        value.parse().map_err(|_| {
            Error::Config(format!("key `{key}`: `{value}` is not {what}"))
        })
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.get_str(key) {
            None => Ok(None),
            Some(v) => Ok(Some(self.parse_as(key, &v, "a number")?)),
        }
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        let v = self.require_str(key)?;
        self.parse_as(key, &v, "a number")
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.get_f64(key)?.unwrap_or(default))
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        match self.get_str(key) {
            None => Ok(None),
            Some(v) => Ok(Some(self.parse_as(key, &v, "an unsigned integer")?)),
        }
    }

    pub fn require_u64(&self, key: &str) -> Result<u64> {
        let v = self.require_str(key)?;
        self.parse_as(key, &v, "an unsigned integer")
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.get_u64(key)?.unwrap_or(default))
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.get_str(key) {
            None => Ok(None),
            Some(v) => Ok(Some(self.parse_as(key, &v, "an unsigned integer")?)),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.get_usize(key)?.unwrap_or(default))
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get_str(key) {
            None => Ok(None),
            Some(v) => match v.as_str() {
                "true" => Ok(Some(true)),
                "false" => Ok(Some(false)),
                other => Err(Error::Config(format!(
                    "key `{key}`: `{other}` is not `true` or `false`"
                ))),
            },
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        Ok(self.get_bool(key)?.unwrap_or(default))
    }

    /// Comma-separated unsigned integers, e.g. `4,4,10`.
    pub fn get_usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.get_str(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|item| self.parse_as(key, item.trim(), "an unsigned integer"))
                .collect::<Result<Vec<usize>>>()
                .map(Some),
        }
    }

    /// Comma-separated numbers, e.g. `0.1,0.05,0.025`.
    pub fn get_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get_str(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|item| self.parse_as(key, item.trim(), "a number"))
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    /// Keys that were stored but never read through a getter.
    pub fn unused_keys(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.entries
            .keys()
            .filter(|k| !used.contains(*k))
            .cloned()
            .collect()
    }

    /// Fails when any stored key was never read, listing the offenders.
    pub fn ensure_fully_used(&self) -> Result<()> {
        let leftover = self.unused_keys();
        if leftover.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown configuration keys: {}",
                leftover.join(", ")
            )))
        }
    }

    /// Canonical document: sorted `key = value` lines. Parsing it yields
    /// the same entries.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// Stored assignments in sorted order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
