//! Flat `key = value` text used by plan files, CLI configs and sidecars.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key = value` lines in file order. `#` starts a comment; blank
/// lines are ignored; a repeated key is an error.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    i + 1
                )));
            };
            kv.insert(k.trim(), v.trim())?;
        }
        Ok(kv)
    }

    pub fn insert(&mut self, key: &str, value: &str) -> Result<()> {
        if key.is_empty() {
            return Err(Error::Config("empty key".into()));
        }
        if self.get(key).is_some() {
            return Err(Error::Config(format!("key {key:?} given twice")));
        }
        self.entries.push((key.to_string(), value.to_string()));
        Ok(())
    }

    /// Inserts or replaces.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// One `key = value` line per entry, in insertion order.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

pub fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("bad value {raw:?} for key {key:?}")))
}

/// Comma-separated list; empty items are rejected.
pub fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',').map(|s| value(key, s.trim())).collect()
}

pub fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad boolean {raw:?} for key {key:?}"
        ))),
    }
}

pub fn unknown_key<T>(key: &str) -> Result<T> {
    Err(Error::Config(format!("unknown key {key:?}")))
}

pub fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = KeyValues::parse("# header\n\na = 1\n b=two words # note\n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("two words"));
        assert_eq!(kv.iter().count(), 2);
    }

    #[test]
    fn rejects_malformed_and_duplicates() {
        assert!(KeyValues::parse("just text").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse("= 1").is_err());
    }

    #[test]
    fn typed_values() {
        assert_eq!(list::<u64>("k", "1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(list::<u64>("k", "1,,3").is_err());
        assert!(flag("k", "maybe").is_err());
        let e = value::<f64>("lambda", "x").unwrap_err().to_string();
        assert!(e.contains("lambda"));
    }

    #[test]
    fn render_round_trips() {
        let mut kv = KeyValues::default();
        kv.set("x", 1.5);
        kv.set("y", "a,b");
        kv.set("x", 2);
        assert_eq!(KeyValues::parse(&kv.render()).unwrap(), kv);
    }
}
