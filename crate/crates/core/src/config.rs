//! Flat `key = value` configuration text with dotted section prefixes
//! (`model.latent_dim = 64`). Used for run configs and embedded in
//! checkpoint files.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines. `#` starts a comment; blank lines are
    /// ignored; a repeated key keeps the last value.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: invalid key {k:?}", i + 1)));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    /// Canonical text: keys sorted, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: Display,
    {
        self.entries
            .get(key)
            .map(|v| {
                v.parse::<V>()
                    .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
            })
            .transpose()
    }

    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> Result<V>
    where
        V::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list value.
    pub fn get_list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: Display,
    {
        self.entries
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<V>()
                            .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Entries of `other` override entries of `self`.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Entries whose key starts with `prefix.`.
    pub fn section(&self, prefix: &str) -> KvConfig {
        let p = format!("{prefix}.");
        KvConfig {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(&p))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_comments_and_overrides() {
        let c = KvConfig::parse("# run\nmodel.latent_dim = 64 # D\n\ntrain.epochs=3\ntrain.epochs = 5\n")
            .unwrap();
        assert_eq!(c.get::<usize>("model.latent_dim").unwrap(), Some(64));
        assert_eq!(c.get::<usize>("train.epochs").unwrap(), Some(5));
        assert!(KvConfig::parse("novalue\n").is_err());
    }

    #[test]
    fn digest_tracks_any_change() {
        let mut a = KvConfig::parse("a = 1\nb = 2").unwrap();
        let b = KvConfig::parse("b = 2\na = 1").unwrap();
        assert_eq!(a.digest(), b.digest());
        a.set("b", 3);
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn canonical_text_round_trips() {
        let c = KvConfig::parse("x.y = 1,2,3\nz = hello world").unwrap();
        assert_eq!(KvConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.get_list::<u32>("x.y").unwrap(), Some(vec![1, 2, 3]));
    }
}
