//! The resolved configuration of one invocation, with the origin of every
//! setting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use texrec::data::GenConfig;
use texrec::trainer::TrainConfig;

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: Option<u64>,
    pub paths: BTreeMap<String, PathBuf>,
    /// Subcommand parameters that are not part of a module config.
    pub params: BTreeMap<String, toml::Value>,
    /// Where each setting came from: `default`, `file <path>`, `flag --x`
    /// or `derived ...`.
    pub provenance: BTreeMap<String, String>,
    pub train: Option<TrainConfig>,
    pub generator: Option<GenConfig>,
}

impl RunConfig {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            ..Self::default()
        }
    }

    pub fn path(&mut self, key: &str, p: &Path) {
        self.paths.insert(key.to_string(), p.to_path_buf());
    }

    pub fn param(&mut self, key: &str, value: impl Into<toml::Value>, source: &str) {
        self.params.insert(key.to_string(), value.into());
        self.provenance.insert(key.to_string(), source.to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let p = dir.join(RUN_CONFIG_FILE);
        let text = toml::to_string(self).context("serializing run config")?;
        fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))?;
        Ok(p)
    }
}

/// Dotted keys of every leaf in a TOML table.
pub fn leaf_keys(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => leaf_keys(t, &key, out),
            _ => out.push(key),
        }
    }
}

/// A module config assembled from defaults, an optional file and flags.
pub struct Layered<T> {
    pub value: T,
    pub provenance: BTreeMap<String, String>,
}

impl<T: Serialize + for<'de> Deserialize<'de> + Default> Layered<T> {
    /// Reads `file` (if any) on top of defaults. A run config written by an
    /// earlier invocation is accepted too; its `section` table is used.
    pub fn load(file: Option<&Path>, section: &str) -> Result<Self> {
        let mut provenance = BTreeMap::new();
        let defaults = toml::Table::try_from(T::default()).context("serializing defaults")?;
        let mut keys = Vec::new();
        leaf_keys(&defaults, "", &mut keys);
        for k in keys {
            provenance.insert(k, "default".to_string());
        }
        let Some(path) = file else {
            return Ok(Self {
                value: T::default(),
                provenance,
            });
        };
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let mut table: toml::Table = toml::from_str(&text).with_context(|| format!("{}: invalid TOML", path.display()))?;
        if table.contains_key("command") {
            table = match table.remove(section) {
                Some(toml::Value::Table(t)) => t,
                _ => bail!("{}: run config has no [{section}] table", path.display()),
            };
        }
        let mut keys = Vec::new();
        leaf_keys(&table, "", &mut keys);
        let source = format!("file {}", path.display());
        for k in keys {
            provenance.insert(k, source.clone());
        }
        let value: T = toml::Value::Table(table)
            .try_into()
            .with_context(|| format!("{}: invalid configuration", path.display()))?;
        Ok(Self { value, provenance })
    }

    pub fn set_by_flag(&mut self, key: &str, flag: &str) {
        self.provenance.insert(key.to_string(), format!("flag {flag}"));
    }

    pub fn source(&self, key: &str) -> String {
        self.provenance.get(key).cloned().unwrap_or_else(|| "default".to_string())
    }

    pub fn is_default(&self, key: &str) -> bool {
        self.source(key) == "default"
    }
}
