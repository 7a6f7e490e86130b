//! Flat `key=value` configuration files.
//!
//! Keys use the long flag names without the leading dashes. Blank lines and
//! lines starting with `#` are ignored. A value given on the command line
//! wins over the file, which wins over the built-in default.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

pub const KNOWN_KEYS: &[&str] = &[
    "patch-size",
    "stride",
    "variance-threshold",
    "lambda",
    "eps-w",
    "cg-tol",
    "cg-max-iters",
    "epochs",
    "batch-size",
    "seed",
    "beta",
    "airlight",
    "beta-min",
    "beta-max",
    "airlight-min",
    "airlight-max",
    "max-missing-depth",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    source: Option<PathBuf>,
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str, source: Option<&Path>) -> Result<Self, CliError> {
        let origin = || source.map_or_else(|| "config".to_string(), |p| p.display().to_string());
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key=value", origin(), n + 1)))?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::Usage(format!("{}:{}: unknown key `{key}`", origin(), n + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("{}:{}: duplicate key `{key}`", origin(), n + 1)));
            }
        }
        Ok(ConfigFile {
            source: source.map(Path::to_path_buf),
            entries,
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| {
                    CliError::Core(hazenet::Error::Unreadable {
                        path: p.to_path_buf(),
                        source,
                    })
                })?;
                Self::parse(&text, Some(p))
            }
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.entries
            .get(key)
            .map(|raw| {
                raw.parse().map_err(|e| {
                    let origin = self.source.as_ref().map_or_else(|| "config".into(), |p| p.display().to_string());
                    CliError::Usage(format!("{origin}: bad value `{raw}` for `{key}`: {e}"))
                })
            })
            .transpose()
    }

    /// Flag value, else file value, else `default`.
    pub fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }
}

/// An `r,g,b` triple; a single value means gray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rgb(pub [f64; 3]);

impl FromStr for Rgb {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        match parts[..] {
            [v] => Ok(Rgb([v; 3])),
            [r, g, b] => Ok(Rgb([r, g, b])),
            _ => Err(format!("expected r,g,b, got {} values", parts.len())),
        }
    }
}
