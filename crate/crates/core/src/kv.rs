//! Flat `key=value` text records with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may repeat only
//! if the caller accepts it; [`KeyValues::parse`] rejects duplicates.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` into `slot` when present.
    pub fn read<V: FromStr>(&self, key: &str, slot: &mut V) -> Result<()> {
        if let Some(raw) = self.get(key) {
            *slot = raw
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))?;
        }
        Ok(())
    }

    /// Fails on keys outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key {k}"))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dotted_keys_and_comments() {
        let kv = KeyValues::parse("# model\nmca.pooling = max\n\nhfdo.omega=0.25\n").unwrap();
        assert_eq!(kv.get("mca.pooling"), Some("max"));
        let mut omega = 0.5f64;
        kv.read("hfdo.omega", &mut omega).unwrap();
        assert_eq!(omega, 0.25);
        assert!(kv.reject_unknown(&["mca.pooling"]).is_err());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KeyValues::parse("novalue\n").is_err());
        assert!(KeyValues::parse("a=1\na=2\n").is_err());
        let kv = KeyValues::parse("x=abc").unwrap();
        let mut v = 0usize;
        assert!(kv.read("x", &mut v).is_err());
    }
}
