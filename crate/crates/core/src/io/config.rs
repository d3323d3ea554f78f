//! Flat `key = value` text with dotted section prefixes and `#` comments.
//!
//! Values are escaped so that any string survives a round trip: `\\`, `\n`,
//! `\r`, `\t`, and `\s` or `\u{hex}` for whitespace at either end of the value.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigFile {
    entries: Vec<(String, String)>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.split('.').all(|part| {
            !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        })
}

fn escape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let n = v.chars().count();
    for (i, c) in v.chars().enumerate() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            ' ' if i == 0 || i + 1 == n => out.push_str("\\s"),
            c if c.is_whitespace() && (i == 0 || i + 1 == n) => {
                out.push_str(&format!("\\u{{{:x}}}", c as u32))
            }
            c => out.push(c),
        }
    }
    out
}

fn unescape(v: &str) -> Option<String> {
    let mut out = String::with_capacity(v.len());
    let mut it = v.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match it.next()? {
            '\\' => '\\',
            'n' => '\n',
            'r' => '\r',
            't' => '\t',
            's' => ' ',
            'u' => {
                if it.next()? != '{' {
                    return None;
                }
                let hex: String = it.by_ref().take_while(|&c| c != '}').collect();
                char::from_u32(u32::from_str_radix(&hex, 16).ok()?)?
            }
            _ => return None,
        });
    }
    Some(out)
}

impl ConfigFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `key`, replacing an earlier value in place.
    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        if !valid_key(key) {
            return Err(Error::Config(format!("invalid key `{key}`")));
        }
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parsed value of `key`, if present.
    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse `{key} = {v}`"))),
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Entries under `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> Vec<(&str, &str)> {
        self.entries
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(prefix)
                    .and_then(|r| r.strip_prefix('.'))
                    .map(|r| (r, v.as_str()))
            })
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", no + 1)));
            };
            let k = k.trim();
            if cfg.get(k).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", no + 1)));
            }
            let v = unescape(v.trim())
                .ok_or_else(|| Error::Config(format!("line {}: bad escape", no + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {}\n", escape(v)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = super::read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::Malformed {
            path: path.into(),
            detail: "not UTF-8".into(),
        })?;
        Self::parse(text).map_err(|e| Error::Malformed {
            path: path.into(),
            detail: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let c = ConfigFile::parse("# run\ntrain.alpha = 0.0005\n\n  train.seed=3 \nmodel.hidden = 92,92,92\n").unwrap();
        assert_eq!(c.get_parsed::<f64>("train.alpha").unwrap(), Some(0.0005));
        assert_eq!(c.get_parsed::<u64>("train.seed").unwrap(), Some(3));
        assert_eq!(c.section("train"), vec![("alpha", "0.0005"), ("seed", "3")]);
        assert!(c.get_parsed::<u64>("model.hidden").is_err());
    }

    #[test]
    fn arbitrary_values_round_trip() {
        let mut c = ConfigFile::new();
        for (i, v) in [" lead", "trail ", "a = b # c", "multi\nline\\x", "", "\t", "\u{a0}x\u{2003}"].iter().enumerate() {
            c.set(&format!("k.v{i}"), v).unwrap();
        }
        assert_eq!(ConfigFile::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(ConfigFile::parse("novalue\n").is_err());
        assert!(ConfigFile::parse("a b = 1\n").is_err());
        assert!(ConfigFile::parse("a = 1\na = 2\n").is_err());
        assert!(ConfigFile::parse("a = \\q\n").is_err());
        assert!(ConfigFile::parse("a. = 1\n").is_err());
    }
}
