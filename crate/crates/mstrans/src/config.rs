//! Flat `key = value` configuration text with `[section]` headers.
//!
//! The same document type backs config files, run manifests, and the
//! config echo inside checkpoints. Unknown keys are rejected against a
//! per-command schema rather than silently defaulted, so typos fail hard.

use crate::{Error, Result};

/// Ordered sections of ordered `key = value` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigDoc {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl ConfigDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = ConfigDoc::new();
        let mut current: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if name.is_empty() {
                    return Err(Error::Config(format!("line {}: empty section name", lineno + 1)));
                }
                current = Some(name.to_string());
                doc.ensure_section(name);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value` or `[section]`, got {raw:?}",
                    lineno + 1
                )));
            };
            let section = current.clone().ok_or_else(|| {
                Error::Config(format!("line {}: key outside any [section]", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if doc.get(&section, &key).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?} in [{section}]",
                    lineno + 1
                )));
            }
            doc.set(&section, &key, &value);
        }
        Ok(doc)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    fn ensure_section(&mut self, name: &str) -> usize {
        if let Some(i) = self.sections.iter().position(|(n, _)| n == name) {
            return i;
        }
        self.sections.push((name.to_string(), Vec::new()));
        self.sections.len() - 1
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        let i = self.ensure_section(section);
        let entries = &mut self.sections[i].1;
        if let Some(e) = entries.iter_mut().find(|(k, _)| k == key) {
            e.1 = value.to_string();
        } else {
            entries.push((key.to_string(), value.to_string()));
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == section)
            .and_then(|(_, kv)| kv.iter().find(|(k, _)| k == key))
            .map(|(_, v)| v.as_str())
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn keys(&self, section: &str) -> Vec<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == section)
            .map(|(_, kv)| kv.iter().map(|(k, _)| k.as_str()).collect())
            .unwrap_or_default()
    }

    /// Fails on any section or key not present in `schema`
    /// (`(section, allowed keys)` pairs).
    pub fn validate(&self, schema: &[(&str, &[&str])]) -> Result<()> {
        for (name, entries) in &self.sections {
            let Some((_, allowed)) = schema.iter().find(|(s, _)| s == name) else {
                return Err(Error::Config(format!("unknown section [{name}]")));
            };
            for (key, _) in entries {
                if !allowed.contains(&key.as_str()) {
                    return Err(Error::Config(format!("unknown key {key:?} in [{name}]")));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
            out.push('\n');
        }
        out
    }

    // Typed getters. Missing keys fall back to the given default; present
    // but malformed values are errors.

    pub fn get_f64(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad(section, key, v, "a number")),
        }
    }

    pub fn get_usize(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad(section, key, v, "an integer")),
        }
    }

    pub fn get_u64(&self, section: &str, key: &str, default: u64) -> Result<u64> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad(section, key, v, "an integer")),
        }
    }

    pub fn get_bool(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.get(section, key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(bad(section, key, v, "true or false")),
        }
    }

    pub fn get_str(&self, section: &str, key: &str, default: &str) -> String {
        self.get(section, key).unwrap_or(default).to_string()
    }
}

fn bad(section: &str, key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("[{section}] {key} = {value:?}: expected {want}"))
}
