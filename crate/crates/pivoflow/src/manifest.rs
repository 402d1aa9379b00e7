//! Plain-text `key: value` manifests.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String, usize)>,
    path: PathBuf,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Display) -> &mut Self {
        let line = self.entries.len() + 1;
        self.entries.push((key.into(), value.to_string(), line));
        self
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = Self { entries: Vec::new(), path: path.to_path_buf() };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| m.error(i + 1, "expected `key: value`"))?;
            let k = k.trim();
            if m.entries.iter().any(|(e, _, _)| e == k) {
                return Err(m.error(i + 1, &format!("duplicate key {k}")));
            }
            m.entries.push((k.to_string(), v.trim().to_string(), i + 1));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fsutil::read_string(path)?, path)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v, _)| format!("{k}: {v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_text().as_bytes())
    }

    fn error(&self, line: usize, detail: &str) -> Error {
        Error::Manifest { path: self.path.clone(), line, detail: detail.to_string() }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v, _)| (k.as_str(), v.as_str()))
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
            .ok_or_else(|| self.error(0, &format!("missing key {key}")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let (_, v, line) = self
            .entries
            .iter()
            .find(|(k, _, _)| k == key)
            .ok_or_else(|| self.error(0, &format!("missing key {key}")))?;
        v.parse().map_err(|e| self.error(*line, &format!("{key}: cannot parse {v:?}: {e}")))
    }

    /// Comma-separated list of values.
    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let raw = self.get(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|e| self.error(0, &format!("{key}: cannot parse {s:?}: {e}"))))
            .collect()
    }
}

pub fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
