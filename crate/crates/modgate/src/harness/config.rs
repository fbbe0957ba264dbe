//! Flat key=value configuration files.
//!
//! One `key=value` pair per line; `#` starts a comment; keys are consumed by
//! typed getters and anything left over at the end of parsing is an error,
//! not a warning.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
    base_dir: PathBuf,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key {key:?}")));
            }
        }
        Ok(Config {
            values,
            consumed: Default::default(),
            base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        })
    }

    #[cfg(test)]
    pub fn from_pairs(base_dir: &Path, pairs: &[(&str, &str)]) -> Self {
        Config {
            values: pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            consumed: Default::default(),
            base_dir: base_dir.to_path_buf(),
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.values.get(key)?;
        self.consumed.borrow_mut().insert(key.to_string());
        Some(v.as_str())
    }

    pub fn str_opt(&self, key: &str) -> Option<String> {
        self.raw(key).map(|s| s.to_string())
    }

    pub fn str_req(&self, key: &str) -> Result<String> {
        self.str_opt(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    pub fn usize_opt(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("key {key:?}: bad integer {s:?}"))),
        }
    }

    pub fn usize_req(&self, key: &str) -> Result<usize> {
        let s = self.str_req(key)?;
        s.parse()
            .map_err(|_| Error::Config(format!("key {key:?}: bad integer {s:?}")))
    }

    pub fn f64_opt(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("key {key:?}: bad float {s:?}"))),
        }
    }

    pub fn f64_maybe(&self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("key {key:?}: bad float {s:?}"))),
        }
    }

    pub fn u64_opt(&self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("key {key:?}: bad integer {s:?}"))),
        }
    }

    /// Comma-separated float list.
    pub fn f64_list_maybe(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => s
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("key {key:?}: bad float {x:?}")))
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    /// Comma-separated paths resolved against the config file's directory.
    pub fn path_list_req(&self, key: &str) -> Result<Vec<PathBuf>> {
        let s = self.str_req(key)?;
        Ok(s.split(',')
            .map(|x| {
                let p = PathBuf::from(x.trim());
                if p.is_absolute() {
                    p
                } else {
                    self.base_dir.join(p)
                }
            })
            .collect())
    }

    /// Errors if any key was never consumed by a getter.
    pub fn reject_unknown(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown configuration keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}
