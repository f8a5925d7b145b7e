//! Flat `key = value` config files. Keys mirror the long flag names
//! (`lambda-area` or `lambda_area`); values on the command line win.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::Failure;

#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
    source: String,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl FileConfig {
    pub fn parse(text: &str, source: &str, allowed: &[&str]) -> Result<Self, Failure> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("{source}:{}: expected `key = value`", n + 1)))?;
            let key = normalize(key);
            if !allowed.contains(&key.as_str()) {
                return Err(Failure::usage(format!(
                    "{source}:{}: unknown key `{key}` (allowed: {})",
                    n + 1,
                    allowed.join(", ")
                )));
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Failure::usage(format!("{source}:{}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(Self {
            values,
            source: source.to_string(),
        })
    }

    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string(), allowed)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Failure::usage(format!("{}: bad value `{v}` for `{key}`: {e}", self.source)))
            })
            .transpose()
    }

    /// The flag value if given, else the file value.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}
