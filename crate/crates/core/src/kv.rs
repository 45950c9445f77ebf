//! `key = value` configuration documents. Lines starting with `#` are
//! comments; keys may repeat and keep their order.

use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    Parse { key: String, value: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t.split_once('=').ok_or(KvError::Syntax { line: i + 1 })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        if let Some(e) = self.entries.iter_mut().find(|(k, _)| k == key) {
            e.1 = value;
        } else {
            self.entries.push((key.to_string(), value));
        }
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, KvError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| KvError::Parse {
                key: key.to_string(),
                value: v.to_string(),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, KvError> {
        let v = self.get(key).ok_or_else(|| KvError::Missing(key.to_string()))?;
        v.parse().map_err(|_| KvError::Parse {
            key: key.to_string(),
            value: v.to_string(),
        })
    }

    /// Fails on any key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), KvError> {
        for (k, _) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(KvError::UnknownKey(k.clone()));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}
