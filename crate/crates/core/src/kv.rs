//! `key = value` text files with `#` comments, as used by configs, volume
//! metadata and run manifests.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses `text` into entries in file order. Blank lines and `#` comments
/// are skipped; duplicate keys are an error.
pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            msg: format!("expected `key = value`, found `{content}`"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config { line, msg: "empty key".into() });
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config {
                line,
                msg: format!("duplicate key `{key}` (first set on line {})", prev.line),
            });
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

impl Entry {
    fn err(&self, what: &str) -> Error {
        Error::Config {
            line: self.line,
            msg: format!("`{}`: cannot parse `{}` as {what}", self.key, self.value),
        }
    }

    pub fn usize(&self) -> Result<usize> {
        self.value.parse().map_err(|_| self.err("a non-negative integer"))
    }

    pub fn u64(&self) -> Result<u64> {
        self.value.parse().map_err(|_| self.err("a non-negative integer"))
    }

    pub fn f64(&self) -> Result<f64> {
        self.value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err("a finite number"))
    }

    pub fn bool(&self) -> Result<bool> {
        match self.value.as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(self.err("a boolean")),
        }
    }

    /// Comma-separated list of integers, e.g. `16, 32, 64`.
    pub fn usize_list(&self) -> Result<Vec<usize>> {
        if self.value.is_empty() {
            return Ok(Vec::new());
        }
        self.value
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| self.err("a list of integers")))
            .collect()
    }

    pub fn invalid(&self, msg: impl std::fmt::Display) -> Error {
        Error::Config {
            line: self.line,
            msg: format!("`{}`: {msg}", self.key),
        }
    }
}

pub fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
