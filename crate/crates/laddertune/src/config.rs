//! Flat `key=value` run configuration. Keys are namespaced with dots
//! (`model.d_model`, `train.lr`). A config file provides the base; `--set`
//! pairs from the command line override it. Consumers mark keys as they read
//! them, and `finish` rejects anything left over, so typos fail loudly.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

fn parse_pair(raw: &str, origin: &str) -> Result<(String, String)> {
    let Some((k, v)) = raw.split_once('=') else {
        return Err(Error::Config(format!("{origin}: `{raw}` is not key=value")));
    };
    let k = k.trim();
    let v = v.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("{origin}: empty key in `{raw}`")));
    }
    Ok((k.to_string(), v.to_string()))
}

impl Config {
    pub fn empty() -> Self {
        Config::default()
    }

    /// Parse a file of `key=value` lines; `#` starts a comment, blank lines
    /// are skipped, later lines override earlier ones.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.split_once('#') {
                Some((before, _)) => before,
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = parse_pair(line, &format!("{}:{}", path.display(), lineno + 1))?;
            cfg.map.insert(k, v);
        }
        Ok(cfg)
    }

    /// Apply `key=value` override pairs (e.g. repeated `--set` flags).
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for raw in pairs {
            let (k, v) = parse_pair(raw, "--set")?;
            self.map.insert(k, v);
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(key.to_string(), value.to_string());
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.map.get(key);
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v.map(|s| s.as_str())
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` = `{v}` is not an unsigned integer"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` = `{v}` is not an unsigned integer"))),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` = `{v}` is not a number"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(Error::Config(format!("`{key}` = `{v}` is not a bool"))),
        }
    }

    /// Comma-separated list of unsigned integers.
    pub fn get_usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("`{key}`: `{p}` is not an unsigned integer")))
                })
                .collect(),
        }
    }

    pub fn get_f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("`{key}`: `{p}` is not a number")))
                })
                .collect(),
        }
    }

    /// Error if any provided key was never read: either a typo or a knob the
    /// chosen subcommand does not have.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&String> = self.map.keys().filter(|k| !used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let list = unknown
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ");
            Err(Error::Config(format!("unknown config keys: {list}")))
        }
    }
}
