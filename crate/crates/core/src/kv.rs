//! Flat `key = value` text files, one pair per line, `#` comments.
//!
//! Shared by run configs, dataset sidecar metadata, and metric reports.
//! Keys keep their first-seen order on write so files diff cleanly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{MorphError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    pairs: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(MorphError::format(format!(
                    "line {}: expected `key = value`, got `{}`",
                    lineno + 1,
                    raw.trim()
                )));
            };
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            if key.is_empty() {
                return Err(MorphError::format(format!("line {}: empty key", lineno + 1)));
            }
            pairs.push((key.to_string(), value.to_string()));
        }
        Ok(Self { pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
            .map_err(|e| MorphError::format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        for (k, v) in &mut self.pairs {
            if k == key {
                *v = value;
                return;
            }
        }
        self.pairs.push((key.to_string(), value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| MorphError::format(format!("missing key `{key}`")))
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.get(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| MorphError::format(format!("key `{key}`: `{v}` is not an integer")))
            })
            .transpose()
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        Ok(self.get_u64(key)?.map(|v| v as usize))
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| MorphError::format(format!("key `{key}`: `{v}` is not a number")))
            })
            .transpose()
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                other => Err(MorphError::format(format!(
                    "key `{key}`: `{other}` is not a boolean"
                ))),
            })
            .transpose()
    }
}
