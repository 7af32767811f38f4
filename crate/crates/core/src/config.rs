//! Run configuration files and manifests.
//!
//! A config file is TOML with three optional parts:
//!
//! ```toml
//! profile = "desk"        # full | desk, picks the defaults
//!
//! [train]
//! lr0 = 0.25
//! bits = 16
//!
//! [split]
//! query_per_class = 25
//! ```
//!
//! Keys left out take the profile's defaults; unknown keys are errors. A
//! manifest is the fully resolved config plus a `[run]` table, so a manifest
//! can be passed back as `--config` to repeat a run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::SplitConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 4096 hidden units, lr 0.001, 20000 steps.
    Full,
    /// 64 hidden units, 16 bits, 2000 steps.
    #[default]
    Desk,
}

impl Profile {
    pub fn train(self) -> TrainConfig {
        match self {
            Profile::Full => TrainConfig::default(),
            Profile::Desk => TrainConfig::desk(),
        }
    }

    pub fn split(self) -> SplitConfig {
        match self {
            Profile::Full => SplitConfig::default(),
            Profile::Desk => SplitConfig {
                query_per_class: 25,
                train_per_class: 100,
                query_in_db: false,
            },
        }
    }
}

impl FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(format!("unknown profile `{other}` (full|desk)")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Full => "full",
            Profile::Desk => "desk",
        })
    }
}

/// Provenance recorded next to run outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub version: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub train: TrainConfig,
    pub split: SplitConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunInfo>,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        RunConfig {
            profile,
            train: profile.train(),
            split: profile.split(),
            run: None,
        }
    }

    /// Parses a possibly partial config, filling gaps from its profile.
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let profile = match user.get("profile") {
            None => Profile::default(),
            Some(toml::Value::String(s)) => s.parse().map_err(Error::Config)?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
        };
        let base = toml::Table::try_from(RunConfig::for_profile(profile))
            .map_err(|e| Error::Config(format!("{e}")))?;
        let merged = merge(base, user);
        let config: RunConfig = merged.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        config.train.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        if self.train.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} does not fit a TOML integer", self.train.seed)));
        }
        toml::to_string(self).map_err(|e| Error::Config(format!("{e}")))
    }

    /// Writes the resolved config with a `[run]` table.
    pub fn write_manifest(&self, path: impl AsRef<Path>, command: &str, features: Option<&Path>) -> Result<()> {
        let mut m = self.clone();
        m.run = Some(RunInfo {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            features: features.map(|p| p.display().to_string()),
        });
        Ok(std::fs::write(path, m.to_toml()?)?)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_profile(Profile::default())
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}
