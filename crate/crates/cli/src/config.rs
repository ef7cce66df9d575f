//! `key=value` run configuration merged under command-line flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::Failure;

/// Keys accepted in a config file. Flag names use dashes, keys underscores.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "weights",
    "iters",
    "intra_iters",
    "gop_size",
    "entropy",
    "no_flow_refine",
    "no_bipred_net",
    "no_temporal_skip",
    "flow_levels",
    "flow_iters",
    "steps",
    "lr",
    "halve_every",
    "batch",
    "patch",
    "clip",
    "train_iters",
    "entropy_steps",
    "entropy_batch",
    "clips",
    "size",
    "loss_weights",
];

pub const SEED_ENV: &str = "BPDVC_SEED";

#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
                ConfigFile::parse(&text)
            }
        }
    }

    /// Blank lines and `#` comments are skipped; keys may repeat only once.
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("config line {}: expected key=value", i + 1)))?;
            let key = k.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Failure::Usage(format!("config line {}: unknown key `{}`", i + 1, k.trim())));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Failure::Usage(format!("config line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(ConfigFile { values })
    }

    /// The flag value if given, else the parsed config value.
    pub fn get<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key));
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| Failure::Usage(format!("config key `{key}`: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, Failure>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    /// A switch is on when the flag is given or the config sets it true.
    pub fn switch(&self, key: &str, flag: bool) -> Result<bool, Failure> {
        Ok(flag || self.get::<bool>(key, None)?.unwrap_or(false))
    }

    /// Seed from the flag, then the config, then `BPDVC_SEED`, then 0.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64, Failure> {
        if let Some(s) = self.get("seed", flag)? {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|e| Failure::Usage(format!("{SEED_ENV}: {e}"))),
            Err(_) => Ok(0),
        }
    }
}

/// Comma-separated list such as `2000,5000,10000`.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let items: Result<Vec<T>, String> =
            s.split(',').map(|p| p.trim().parse::<T>().map_err(|e| format!("`{}`: {e}", p.trim()))).collect();
        let items = items?;
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(items))
    }
}
