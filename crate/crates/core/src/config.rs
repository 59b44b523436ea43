//! Flat `key = value` run configuration with one section per command.
//!
//! ```text
//! # keys before any section apply to every command
//! seed = 7
//!
//! [train]
//! variant = balanced12
//! epochs = 5
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub global: BTreeMap<String, String>,
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim().to_string();
                cfg.sections.entry(name.clone()).or_default();
                section = Some(name);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() {
                return Err(Error::Config(format!("config line {}: empty key", n + 1)));
            }
            let target = match &section {
                Some(s) => cfg.sections.get_mut(s).expect("section inserted above"),
                None => &mut cfg.global,
            };
            if target.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("config line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(cfg)
    }

    /// Global keys overlaid with the command's section.
    pub fn for_command(&self, command: &str) -> BTreeMap<String, String> {
        let mut out = self.global.clone();
        if let Some(s) = self.sections.get(command) {
            out.extend(s.clone());
        }
        out
    }
}

/// Fully resolved settings for one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Merges file values with flag values; flags win.
    pub fn resolve(
        command: &str,
        file: Option<&ConfigFile>,
        flags: impl IntoIterator<Item = (String, String)>,
        allowed: &[&str],
    ) -> Result<Self> {
        let mut values = file.map(|f| f.for_command(command)).unwrap_or_default();
        values.extend(flags);
        if let Some(k) = values.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::Config(format!(
                "unknown key {k:?} for `{command}` (known: {})",
                allowed.join(", ")
            )));
        }
        Ok(RunConfig {
            command: command.to_string(),
            values,
        })
    }

    pub fn set_default(&mut self, key: &str, value: impl ToString) {
        self.values.entry(key.to_string()).or_insert_with(|| value.to_string());
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.str(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("{key} = {v:?} is not a valid value")))
            })
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("`{}` needs `{key}`", self.command)))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.str(key) {
            None | Some("false") | Some("no") | Some("0") => Ok(false),
            Some("true") | Some("yes") | Some("1") => Ok(true),
            Some(v) => Err(Error::Config(format!("{key} = {v:?} is not a boolean"))),
        }
    }

    /// The resolved configuration in the same format [`ConfigFile`] reads.
    pub fn render(&self) -> String {
        let mut s = format!("[{}]\n", self.command);
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_override_globals_and_flags_override_both() {
        let f = ConfigFile::parse("seed = 1\nout = a # comment\n[train]\nseed = 2\n[eval]\nseed = 3\n").unwrap();
        let rc = RunConfig::resolve("train", Some(&f), [("out".to_string(), "b".to_string())], &["seed", "out"]).unwrap();
        assert_eq!(rc.str("seed"), Some("2"));
        assert_eq!(rc.str("out"), Some("b"));
        let again = RunConfig::resolve("train", Some(&ConfigFile::parse(&rc.render()).unwrap()), [], &["seed", "out"]).unwrap();
        assert_eq!(again, rc);
    }

    #[test]
    fn malformed_input_is_config_error() {
        assert!(matches!(ConfigFile::parse("no equals sign"), Err(Error::Config(_))));
        assert!(matches!(ConfigFile::parse("a = 1\na = 2"), Err(Error::Config(_))));
        let f = ConfigFile::parse("bogus = 1").unwrap();
        assert!(matches!(RunConfig::resolve("train", Some(&f), [], &["seed"]), Err(Error::Config(_))));
    }

    #[test]
    fn typed_access() {
        let rc = RunConfig::resolve("x", None, [("n".into(), "5".into()), ("b".into(), "yes".into())], &["n", "b"]).unwrap();
        assert_eq!(rc.get::<usize>("n").unwrap(), Some(5));
        assert!(rc.flag("b").unwrap());
        assert!(rc.get::<f64>("missing").unwrap().is_none());
        assert!(rc.require::<usize>("missing").is_err());
    }
}
