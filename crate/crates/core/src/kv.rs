//! Line-oriented `key = value` documents, shared by manifests, checkpoints
//! and run configs. `#` starts a comment; blank lines are ignored.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Line {
    pub number: usize,
    /// Byte offset of the line start.
    pub offset: u64,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Line>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (i, raw) in text.split_inclusive('\n').enumerate() {
        let line_offset = offset;
        offset += raw.len() as u64;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(Error::format(line_offset, format!("line {}: expected `key = value`", i + 1)));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::format(line_offset, format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|l: &Line| l.key == key) {
            return Err(Error::format(line_offset, format!("line {}: duplicate key `{key}`", i + 1)));
        }
        out.push(Line { number: i + 1, offset: line_offset, key: key.to_string(), value: v.trim().to_string() });
    }
    Ok(out)
}

/// Parsed document with typed lookups.
#[derive(Clone, Debug, Default)]
pub struct Doc {
    lines: Vec<Line>,
}

impl Doc {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(Doc { lines: parse(text)? })
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn line(&self, key: &str) -> Option<&Line> {
        self.lines.iter().find(|l| l.key == key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.line(key).map(|l| l.value.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&Line> {
        self.line(key).ok_or_else(|| Error::format(0, format!("missing key `{key}`")))
    }

    pub fn parsed<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let l = self.require(key)?;
        l.value
            .parse()
            .map_err(|_| Error::format(l.offset, format!("line {}: bad value `{}` for `{key}`", l.number, l.value)))
    }

    pub fn list<V: std::str::FromStr>(&self, key: &str) -> Result<Vec<V>> {
        let l = self.require(key)?;
        parse_list(&l.value)
            .ok_or_else(|| Error::format(l.offset, format!("line {}: bad list `{}` for `{key}`", l.number, l.value)))
    }
}

/// Comma-separated values.
pub fn parse_list<V: std::str::FromStr>(s: &str) -> Option<Vec<V>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

pub fn join<V: std::fmt::Display>(values: &[V]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
