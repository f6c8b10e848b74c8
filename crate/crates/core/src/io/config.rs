//! `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Consumers pull keys with the typed `take_*` accessors and then call
//! [`ConfigFile::finish`], which rejects any key nobody claimed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    // key -> (line number, raw value)
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key or value")));
            }
            if let Some((prev, _)) = entries.insert(k.to_string(), (line_no, v.to_string())) {
                return Err(Error::Config(format!("line {line_no}: key `{k}` already set on line {prev}")));
            }
        }
        Ok(ConfigFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    /// Removes `key` and parses its value, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!(
                    "{}: cannot parse `{v}` as {} for key `{key}`",
                    origin(line),
                    std::any::type_name::<T>()
                ))
            }),
        }
    }

    /// Like [`take`](Self::take) but writes into `slot` when present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| {
                    s.trim().parse::<T>().map_err(|_| {
                        Error::Config(format!("{}: bad list element `{}` for key `{key}`", origin(line), s.trim()))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    /// Errors if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((k, (line, _))) = self.entries.iter().next() {
            let mut msg = format!("{}: unknown key `{k}`", origin(*line));
            if self.entries.len() > 1 {
                let all: Vec<_> = self.entries.keys().map(String::as_str).collect();
                let _ = write!(msg, " (all unrecognised: {})", all.join(", "));
            }
            return Err(Error::Config(msg));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, (_, v)) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

// Line 0 marks a value set programmatically rather than read from a file.
fn origin(line: usize) -> String {
    if line == 0 {
        "override".into()
    } else {
        format!("line {line}")
    }
}
