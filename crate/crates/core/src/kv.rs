//! Flat `key = value` text files used for configs, rigs, manifests and
//! reports. Blank lines and `#` comments are ignored; the first line may be
//! a version header.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("duplicate key {0}")]
    Duplicate(String),
    #[error("missing key {0}")]
    Missing(String),
    #[error("key {key}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("expected header {expected:?}, found {found:?}")]
    Header { expected: String, found: String },
}

/// Parsed key-value document; keys are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    map: BTreeMap<String, String>,
}

impl KvDoc {
    /// Parses `text`; when `header` is given the first non-empty line must
    /// equal it exactly.
    pub fn parse(text: &str, header: Option<&str>) -> Result<Self, KvError> {
        let mut lines = text.lines().enumerate().peekable();
        if let Some(expected) = header {
            let found = lines
                .by_ref()
                .map(|(_, l)| l.trim())
                .find(|l| !l.is_empty())
                .unwrap_or("");
            if found != expected {
                return Err(KvError::Header {
                    expected: expected.into(),
                    found: found.into(),
                });
            }
        }
        let mut map = BTreeMap::new();
        for (i, raw) in lines {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| KvError::Syntax {
                line: i + 1,
                text: raw.into(),
            })?;
            let key = k.trim().to_string();
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(KvError::Duplicate(key));
            }
        }
        Ok(Self { map })
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn require_str(&self, key: &str) -> Result<&str, KvError> {
        self.get_str(key).ok_or_else(|| KvError::Missing(key.into()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        match self.get_str(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| KvError::Value {
                key: key.into(),
                value: v.into(),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, KvError> {
        self.get(key)?.ok_or_else(|| KvError::Missing(key.into()))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, KvError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Whitespace-separated list of values.
    pub fn require_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, KvError> {
        let raw = self.require_str(key)?;
        raw.split_whitespace()
            .map(|tok| {
                tok.parse().map_err(|_| KvError::Value {
                    key: key.into(),
                    value: raw.into(),
                })
            })
            .collect()
    }
}

/// Ordered writer producing text `KvDoc::parse` reads back.
#[derive(Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new(header: Option<&str>) -> Self {
        let mut out = String::new();
        if let Some(h) = header {
            out.push_str(h);
            out.push('\n');
        }
        Self { out }
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        for line in text.lines() {
            let _ = writeln!(self.out, "# {line}");
        }
        self
    }

    pub fn entry(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.out, "{key} = {value}");
        self
    }

    /// Space-separated list; `f64` values use the shortest round-trip form.
    pub fn list<T: std::fmt::Display>(&mut self, key: &str, values: &[T]) -> &mut Self {
        let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.entry(key, joined.join(" "))
    }

    pub fn blank(&mut self) -> &mut Self {
        self.out.push('\n');
        self
    }

    pub fn finish(self) -> String {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let doc = KvDoc::parse("hdr v1\n# c\na = 1.5\nb = x y  # tail\n\nlist = 1 2 3\n", Some("hdr v1")).unwrap();
        assert_eq!(doc.require::<f64>("a").unwrap(), 1.5);
        assert_eq!(doc.require_str("b").unwrap(), "x y");
        assert_eq!(doc.require_list::<u32>("list").unwrap(), vec![1, 2, 3]);
        assert!(matches!(doc.require::<f64>("zz"), Err(KvError::Missing(_))));
        assert!(matches!(doc.require::<f64>("b"), Err(KvError::Value { .. })));
        assert!(KvDoc::parse("a = 1\na = 2", None).is_err());
        assert!(KvDoc::parse("nonsense", None).is_err());
        assert!(KvDoc::parse("other\n", Some("hdr v1")).is_err());
    }

    #[test]
    fn float_lists_round_trip_exactly() {
        let vals = [0.1, -1.0 / 3.0, 1e-300, 123456.789];
        let mut w = KvWriter::new(None);
        w.list("v", &vals);
        let doc = KvDoc::parse(&w.finish(), None).unwrap();
        assert_eq!(doc.require_list::<f64>("v").unwrap(), vals);
    }
}
