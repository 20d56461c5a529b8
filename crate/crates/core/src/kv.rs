//! Ordered `key = value` text blocks used by checkpoint headers and report
//! sidecars.
//!
//! Lines are `key = value`; `[name]` lines open a section, `#` starts a
//! comment, and blank lines are ignored. Floats are written with Rust's
//! shortest round-trip formatting, so parsing recovers them bit-exactly.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvBlock {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl KvBlock {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("[{}] is missing key `{key}`", self.name)))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("[{}] `{key}` has unparsable value `{raw}`", self.name)))
    }

    pub fn write(&self, out: &mut String) {
        if !self.name.is_empty() {
            out.push_str(&format!("[{}]\n", self.name));
        }
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
}

/// Renders blocks in order; an unnamed first block has no section line.
pub fn render(blocks: &[KvBlock]) -> String {
    let mut s = String::new();
    for b in blocks {
        b.write(&mut s);
    }
    s
}

/// Parses text into blocks. Entries before the first section line go into
/// an unnamed block.
pub fn parse(text: &str) -> Result<Vec<KvBlock>> {
    let mut blocks = vec![KvBlock::default()];
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            blocks.push(KvBlock::new(name.trim()));
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format(format!("line {}: expected `key = value`, got `{line}`", n + 1)));
        };
        let block = blocks.last_mut().expect("nonempty");
        let key = k.trim();
        if block.entries.iter().any(|(e, _)| e == key) {
            return Err(Error::Format(format!("line {}: duplicate key `{key}`", n + 1)));
        }
        block.entries.push((key.to_string(), v.trim().to_string()));
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_floats_exactly() {
        let vals = [0.1, 1.0 / 3.0, -2.5e-300, f64::MIN_POSITIVE, 1e17 + 1.0];
        let mut b = KvBlock::new("x");
        for (i, v) in vals.iter().enumerate() {
            b.push(&format!("v{i}"), v);
        }
        let parsed = parse(&render(&[b])).unwrap();
        for (i, v) in vals.iter().enumerate() {
            assert_eq!(parsed[1].get::<f64>(&format!("v{i}")).unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn rejects_garbage_and_duplicates() {
        assert!(matches!(parse("a = 1\nnonsense\n"), Err(Error::Format(_))));
        assert!(matches!(parse("a = 1\na = 2\n"), Err(Error::Format(_))));
        let b = &parse("[s]\nn = x\n").unwrap()[1];
        assert!(matches!(b.get::<usize>("n"), Err(Error::Format(_))));
        assert!(matches!(b.get::<usize>("m"), Err(Error::Format(_))));
    }
}
