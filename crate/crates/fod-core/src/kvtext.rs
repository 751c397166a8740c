//! Minimal sectioned key-value text format.
//!
//! Used for config files, dataset manifests, and metric reports:
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! other = 1 2 3
//! ```
//!
//! Section and key order is preserved on write, so serialization is
//! byte-deterministic for a given document.

use crate::error::{FodError, Result};

#[derive(Debug, Clone, Default)]
pub struct KvDoc {
    sections: Vec<KvSection>,
}

#[derive(Debug, Clone)]
pub struct KvSection {
    pub name: String,
    entries: Vec<(String, String)>,
}

impl KvSection {
    pub fn new(name: impl Into<String>) -> Self {
        KvSection {
            name: name.into(),
            entries: Vec::new(),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

impl KvDoc {
    pub fn new() -> Self {
        KvDoc::default()
    }

    pub fn parse(text: &str) -> Result<KvDoc> {
        let mut doc = KvDoc::new();
        let mut current: Option<KvSection> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    FodError::format(0, format!("line {}: unterminated section header", lineno + 1))
                })?;
                if let Some(sec) = current.take() {
                    doc.sections.push(sec);
                }
                current = Some(KvSection::new(name.trim()));
            } else if let Some(eq) = line.find('=') {
                let (k, v) = line.split_at(eq);
                let sec = current.get_or_insert_with(|| KvSection::new(""));
                sec.set(k.trim(), v[1..].trim());
            } else {
                return Err(FodError::format(
                    0,
                    format!("line {}: expected `key = value` or `[section]`", lineno + 1),
                ));
            }
        }
        if let Some(sec) = current.take() {
            doc.sections.push(sec);
        }
        Ok(doc)
    }

    pub fn push(&mut self, section: KvSection) {
        self.sections.push(section);
    }

    pub fn section(&self, name: &str) -> Option<&KvSection> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn sections(&self) -> impl Iterator<Item = &KvSection> {
        self.sections.iter()
    }

    /// Sections whose name starts with `prefix` (e.g. every `item *`).
    pub fn sections_with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = &'a KvSection> {
        self.sections.iter().filter(move |s| s.name.starts_with(prefix))
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.section(section).and_then(|s| s.get(key))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<T> {
        let raw = self
            .get(section, key)
            .ok_or_else(|| FodError::Config(format!("missing key [{section}] {key}")))?;
        raw.parse().map_err(|_| {
            FodError::Config(format!("key [{section}] {key}: cannot parse {raw:?}"))
        })
    }

    pub fn get_list<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Vec<T>> {
        let raw = self
            .get(section, key)
            .ok_or_else(|| FodError::Config(format!("missing key [{section}] {key}")))?;
        raw.split_whitespace()
            .map(|tok| {
                tok.parse().map_err(|_| {
                    FodError::Config(format!("key [{section}] {key}: bad element {tok:?}"))
                })
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for sec in &self.sections {
            if !sec.name.is_empty() {
                out.push('[');
                out.push_str(&sec.name);
                out.push_str("]\n");
            }
            for (k, v) in sec.entries() {
                out.push_str(k);
                out.push_str(" = ");
                out.push_str(v);
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

/// FNV-1a 64-bit hash, used for manifest digests and config digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
