//! Flag resolution: command line, then config file, then built-in default.

use std::fmt::Debug;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Cli,
    Config,
    Default,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Cli => "cli",
            Source::Config => "config",
            Source::Default => "default",
        }
    }
}

/// Resolves settings for one command. A config file is TOML; keys may sit at
/// the top level or in a table named after the command, the latter winning.
/// Keys are the flag names with `_` for `-`.
pub struct Resolver {
    command: String,
    table: toml::Table,
    resolved: Vec<(String, String, Source)>,
}

impl Resolver {
    pub fn new(command: &str, config: Option<&Path>) -> Result<Self> {
        let table = match config {
            Some(p) => {
                if !p.exists() {
                    return Err(reglat::Error::MissingFile(p.to_path_buf()).into());
                }
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        Ok(Self {
            command: command.to_string(),
            table,
            resolved: Vec::new(),
        })
    }

    fn lookup(&self, key: &str) -> Option<&toml::Value> {
        self.table
            .get(&self.command)
            .and_then(|v| v.as_table())
            .and_then(|t| t.get(key))
            .or_else(|| self.table.get(key).filter(|v| !v.is_table()))
    }

    pub fn get<T: DeserializeOwned + Debug>(
        &mut self,
        key: &str,
        cli: Option<T>,
        default: impl FnOnce() -> T,
    ) -> Result<T> {
        let (value, source) = match cli {
            Some(v) => (v, Source::Cli),
            None => match self.lookup(key) {
                Some(v) => (
                    v.clone()
                        .try_into()
                        .with_context(|| format!("config key '{key}' has the wrong type"))?,
                    Source::Config,
                ),
                None => (default(), Source::Default),
            },
        };
        self.resolved.push((key.to_string(), format!("{value:?}"), source));
        Ok(value)
    }

    /// Boolean switch: present on the command line means `true`.
    pub fn flag(&mut self, key: &str, cli: bool, default: bool) -> Result<bool> {
        self.get(key, cli.then_some(true), || default)
    }

    pub fn path(&mut self, key: &str, cli: Option<PathBuf>, default: impl FnOnce() -> PathBuf) -> Result<PathBuf> {
        self.get(key, cli, default)
    }

    #[cfg(test)]
    pub fn source(&self, key: &str) -> Option<Source> {
        self.resolved.iter().find(|(k, _, _)| k == key).map(|r| r.2)
    }

    /// One line per setting, e.g. `  lr = 0.001 (config)`.
    pub fn report(&self) -> String {
        let mut out = format!("reglat {}:\n", self.command);
        for (k, v, s) in &self.resolved {
            out.push_str(&format!("  {k} = {v} ({})\n", s.as_str()));
        }
        out
    }
}
