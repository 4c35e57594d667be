//! Resolved run parameters: defaults < config file < `BILIN_SEED` < flags.
//!
//! Config files hold `key = value` lines; `#` starts a comment. The fully
//! resolved set, defaults included, is written as `run.cfg` next to every
//! output.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};

use crate::Usage;

pub const PROVENANCE_FILE: &str = "run.cfg";
pub const SEED_ENV: &str = "BILIN_SEED";

#[derive(Debug, Clone)]
pub struct Params {
    command: &'static str,
    allowed: &'static [&'static str],
    values: BTreeMap<String, String>,
}

impl Params {
    pub fn new(command: &'static str, allowed: &'static [&'static str], config: Option<&Path>) -> Result<Self> {
        let mut p = Params {
            command,
            allowed,
            values: BTreeMap::new(),
        };
        if let Some(path) = config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Usage(format!("{}:{}: expected key = value, got {line:?}", path.display(), n + 1))
                })?;
                let k = k.trim().replace('-', "_");
                if k == "command" {
                    continue;
                }
                p.check_key(&k)
                    .map_err(|e| Usage(format!("{}:{}: {}", path.display(), n + 1, e.0)))?;
                p.values.insert(k, v.trim().to_string());
            }
        }
        Ok(p)
    }

    fn check_key(&self, key: &str) -> std::result::Result<(), Usage> {
        if self.allowed.contains(&key) {
            Ok(())
        } else {
            Err(Usage(format!(
                "unknown key {key:?} for `{}` (allowed: {})",
                self.command,
                self.allowed.join(", ")
            )))
        }
    }

    /// Overrides `key` when the flag was given.
    pub fn flag<T: Display>(&mut self, key: &str, value: Option<T>) {
        debug_assert!(self.allowed.contains(&key), "{key} not declared");
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    /// Applies `BILIN_SEED` unless `--seed` was given explicitly.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<()> {
        if flag.is_none() {
            if let Ok(env) = std::env::var(SEED_ENV) {
                let v: u64 = env
                    .trim()
                    .parse()
                    .map_err(|_| Usage(format!("{SEED_ENV}={env:?} is not an unsigned integer")))?;
                self.values.insert("seed".into(), v.to_string());
            }
        }
        self.flag("seed", flag);
        Ok(())
    }

    /// Typed lookup; an absent key resolves to `default`, which is recorded.
    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
    {
        debug_assert!(self.allowed.contains(&key), "{key} not declared");
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Usage(format!("invalid value {raw:?} for {key}")).into()),
            None => {
                self.values.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn get_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        self.get(key, default)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("command = {}\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn write_provenance(&self, dir: &Path) -> Result<()> {
        let path = dir.join(PROVENANCE_FILE);
        fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Parses `HxWxC`.
pub fn parse_dims(s: &str) -> std::result::Result<(usize, usize, usize), Usage> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Usage(format!("map dims must look like 10x10x8, got {s:?}")))?;
    match parts[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Usage(format!("map dims must have three parts, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[&str] = &["seed", "epochs", "rate"];

    #[test]
    fn precedence_and_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("a.cfg");
        fs::write(&cfg, "# comment\nepochs = 7\nrate=0.5 # trailing\nseed = 3\n").unwrap();
        let mut p = Params::new("demo", KEYS, Some(&cfg)).unwrap();
        p.flag("rate", Some(0.25));
        p.flag::<u64>("seed", None);
        assert_eq!(p.get("epochs", 1usize).unwrap(), 7);
        assert_eq!(p.get("rate", 1.0f64).unwrap(), 0.25);
        assert_eq!(p.get("seed", 0u64).unwrap(), 3);
        assert_eq!(p.to_text(), "command = demo\nepochs = 7\nrate = 0.25\nseed = 3\n");

        p.write_provenance(dir.path()).unwrap();
        let again = Params::new("demo", KEYS, Some(&dir.path().join(PROVENANCE_FILE))).unwrap();
        assert_eq!(again.to_text(), p.to_text());
    }

    #[test]
    fn defaults_are_recorded() {
        let mut p = Params::new("demo", KEYS, None).unwrap();
        assert_eq!(p.get("epochs", 4usize).unwrap(), 4);
        assert!(p.to_text().contains("epochs = 4"));
    }

    #[test]
    fn bad_input_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("a.cfg");
        fs::write(&cfg, "colour = red\n").unwrap();
        let e = Params::new("demo", KEYS, Some(&cfg)).unwrap_err();
        assert!(e.downcast_ref::<Usage>().is_some());
        fs::write(&cfg, "epochs\n").unwrap();
        assert!(Params::new("demo", KEYS, Some(&cfg)).is_err());
        let mut p = Params::new("demo", KEYS, None).unwrap();
        p.flag("epochs", Some("many"));
        assert!(p.get("epochs", 1usize).unwrap_err().downcast_ref::<Usage>().is_some());
    }

    #[test]
    fn dims() {
        assert_eq!(parse_dims("27x27x512").unwrap(), (27, 27, 512));
        assert!(parse_dims("27x27").is_err());
        assert!(parse_dims("axbxc").is_err());
    }
}
