//! Flat `key = value` text format with optional `[section name]` blocks.
//!
//! `#` starts a comment line. Keys may not repeat within a block.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvDocument {
    /// Entries before the first section header.
    pub base: Vec<Entry>,
    pub sections: Vec<(String, Vec<Entry>)>,
}

pub fn parse_kv(text: &str, origin: &Path) -> Result<KvDocument> {
    let mut doc = KvDocument::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::format(origin, format!("line {line_no}: unterminated section header")))?
                .trim();
            if name.is_empty() {
                return Err(Error::format(origin, format!("line {line_no}: empty section name")));
            }
            if doc.sections.iter().any(|(n, _)| n == name) {
                return Err(Error::format(origin, format!("line {line_no}: duplicate section [{name}]")));
            }
            doc.sections.push((name.to_string(), Vec::new()));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(origin, format!("line {line_no}: expected key = value")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::format(origin, format!("line {line_no}: empty key")));
        }
        let block = match doc.sections.last_mut() {
            Some((_, entries)) => entries,
            None => &mut doc.base,
        };
        if block.iter().any(|e| e.key == key) {
            return Err(Error::format(origin, format!("line {line_no}: duplicate key {key}")));
        }
        block.push(Entry {
            key: key.to_string(),
            value: value.to_string(),
            line: line_no,
        });
    }
    Ok(doc)
}

pub fn read_kv(path: &Path) -> Result<KvDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text, path)
}
