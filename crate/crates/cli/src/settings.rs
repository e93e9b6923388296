//! Config file support. The file holds `key=value` lines using the long flag
//! names (`rca-prob=0.5`, with `_` accepted for `-`); `#` starts a comment.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use grounding::Error;

use crate::Failure;

#[derive(Debug, Default)]
pub struct Settings {
    values: HashMap<String, String>,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| {
            Failure::Data(Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut values = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Failure::Usage(format!("config line {}: expected key=value, got {raw:?}", i + 1))
            })?;
            values.insert(k.trim().replace('_', "-"), v.trim().to_string());
        }
        Ok(Settings { values })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Failure::Usage(format!("config key {key}={v}: {e}"))),
        }
    }

    /// Flag value, else config value, else `default`.
    pub fn value<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Failure>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.optional(flag, key)?.unwrap_or(default))
    }

    pub fn optional<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.from_file(key),
        }
    }

    pub fn required<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, Failure>
    where
        T::Err: std::fmt::Display,
    {
        self.optional(flag, key)?
            .ok_or_else(|| Failure::Usage(format!("--{key} is required")))
    }
}
