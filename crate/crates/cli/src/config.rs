//! `key = value` run configuration. Precedence: flags, then the file, then
//! built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{invalid, read_string, Result};

/// Every key any subcommand understands. Unknown keys are rejected so typos
/// do not silently fall back to defaults.
pub const KNOWN_KEYS: &[&str] = &[
    "alpha",
    "batch_size",
    "blocks",
    "checkpoint",
    "classes",
    "colormap",
    "conf_threshold",
    "data",
    "dim",
    "embeddings",
    "encoder_seed",
    "epochs",
    "events",
    "events_per_window",
    "external",
    "format",
    "grid",
    "heads",
    "height",
    "kind",
    "lambda",
    "logit_scale",
    "lr_text",
    "lr_visual",
    "mlp_dim",
    "mlp_max_windows",
    "mode",
    "noise",
    "out",
    "per_class",
    "resize",
    "runs",
    "seed",
    "shots",
    "split",
    "template",
    "token_dim",
    "top_k",
    "warmup",
    "width",
];

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected key = value", i + 1)))?;
            let key = key.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(invalid(format!("config line {}: unknown key {key:?}", i + 1)));
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(invalid(format!("config line {}: {key} set twice", i + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::parse(&read_string(p)?),
            None => Ok(Self::default()),
        }
    }

    /// The flag if given, else the file's value, else `None`.
    pub fn opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| invalid(format!("config key {key} = {v:?}: {e}")))
            })
            .transpose()
    }

    pub fn get<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.opt(flag, key)?.ok_or_else(|| {
            invalid(format!(
                "missing --{} (or `{key} = ...` in the config file)",
                key.replace('_', "-")
            ))
        })
    }
}

/// Comma-separated list, e.g. a lambda grid.
pub fn parse_list<T>(s: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|e| invalid(format!("list item {v:?}: {e}"))))
        .collect()
}
