//! Flat key-value experiment configuration with layered resolution:
//! command-line overrides beat the config file, which beats built-in
//! defaults. The fully resolved map is written into the run directory
//! before any work starts.

use crate::ckpt::crc32;
use crate::error::{Result, SdError};
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct ExperimentConfig {
    entries: Vec<(String, String)>,
}

impl ExperimentConfig {
    pub fn new() -> Self {
        ExperimentConfig { entries: Vec::new() }
    }

    /// Parse `key=value` lines; '#' starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SdError::Parse(format!("config line {} is not key=value: {raw:?}", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SdError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Insert or overwrite a key.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        if let Some(e) = self.entries.iter_mut().find(|(k, _)| k == key) {
            e.1 = value;
        } else {
            self.entries.push((key.to_string(), value));
        }
    }

    /// Layer `other` on top of this config (its values win).
    pub fn overlay(&mut self, other: &ExperimentConfig) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw =
            self.get(key).ok_or_else(|| SdError::Parse(format!("missing config key {key:?}")))?;
        raw.parse()
            .map_err(|_| SdError::Parse(format!("config key {key:?} has unparseable value {raw:?}")))
    }

    pub fn parsed_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                SdError::Parse(format!("config key {key:?} has unparseable value {raw:?}"))
            }),
        }
    }

    /// Canonical text form (sorted by key) — what gets written to disk and
    /// hashed into manifests.
    pub fn to_text(&self) -> String {
        let mut sorted = self.entries.clone();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut s = String::new();
        for (k, v) in sorted {
            s.push_str(&k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn hash(&self) -> u32 {
        crc32(self.to_text().as_bytes())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
