//! Flat `key = value` run configuration.
//!
//! Every key a command reads is recorded with its resolved value, so the
//! snapshot written to the output directory reproduces the run exactly.
//! Keys that were supplied but never read are rejected.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use lqf::{LqfError, Result};

#[derive(Debug, Default)]
pub struct Config {
    given: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| LqfError::Malformed {
                line: n + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(LqfError::Malformed { line: n + 1, message: "empty key".into() });
            }
            if cfg.given.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(LqfError::Malformed { line: n + 1, message: format!("duplicate key `{key}`") });
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| LqfError::contract(format!("--set expects key=value, got `{assignment}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(LqfError::contract("--set with empty key"));
        }
        self.given.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    fn record(&self, key: &str, value: String) {
        self.resolved.borrow_mut().insert(key.to_string(), value);
    }

    /// Raw string value, recording the default when absent.
    pub fn string(&self, key: &str, default: &str) -> String {
        let value = self.given.get(key).cloned().unwrap_or_else(|| default.to_string());
        self.record(key, value.clone());
        value
    }

    /// Optional value; recorded only when present.
    pub fn optional(&self, key: &str) -> Option<String> {
        let value = self.given.get(key).cloned().filter(|v| !v.is_empty());
        if let Some(v) = &value {
            self.record(key, v.clone());
        }
        value
    }

    pub fn get<T: FromStr + Display>(&self, key: &str, default: T) -> Result<T> {
        match self.given.get(key) {
            Some(raw) => {
                let v = raw
                    .parse::<T>()
                    .map_err(|_| LqfError::contract(format!("config key `{key}`: cannot parse `{raw}`")))?;
                self.record(key, raw.clone());
                Ok(v)
            }
            None => {
                self.record(key, default.to_string());
                Ok(default)
            }
        }
    }

    /// Floats are recorded in round-trip form.
    pub fn real(&self, key: &str, default: f64) -> Result<f64> {
        match self.given.get(key) {
            Some(raw) => {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| LqfError::contract(format!("config key `{key}`: cannot parse `{raw}` as a number")))?;
                if !v.is_finite() {
                    return Err(LqfError::contract(format!("config key `{key}`: value must be finite")));
                }
                self.record(key, format!("{v:?}"));
                Ok(v)
            }
            None => {
                self.record(key, format!("{default:?}"));
                Ok(default)
            }
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str, default: &str) -> Result<Vec<T>> {
        let raw = self.string(key, default);
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse::<T>()
                    .map_err(|_| LqfError::contract(format!("config key `{key}`: cannot parse list item `{}`", s.trim())))
            })
            .collect()
    }

    /// One of `choices`.
    pub fn choice(&self, key: &str, default: &str, choices: &[&str]) -> Result<String> {
        let v = self.string(key, default);
        if !choices.contains(&v.as_str()) {
            return Err(LqfError::contract(format!(
                "config key `{key}`: `{v}` is not one of {}",
                choices.join(", ")
            )));
        }
        Ok(v)
    }

    /// Errors on keys that were supplied but never read.
    pub fn check_unused(&self) -> Result<()> {
        let resolved = self.resolved.borrow();
        let used: BTreeSet<&String> = resolved.keys().collect();
        if let Some(key) = self.given.keys().find(|k| !used.contains(k)) {
            return Err(LqfError::contract(format!("unknown config key `{key}`")));
        }
        Ok(())
    }

    /// Resolved configuration, sorted by key.
    pub fn snapshot(&self, command: &str) -> String {
        let mut out = format!("# lqf {command}\n");
        for (k, v) in self.resolved.borrow().iter() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
