// SPDX-License-Identifier: Apache-2.0

//! Layered key/value settings: INI file, then `MUI_LAB_<SECTION>__<KEY>` environment
//! variables. Command-line flags are applied by the caller on top.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use mui_core::{Error, Result};

pub const ENV_PREFIX: &str = "MUI_LAB_";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<(String, String), String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut s = Self::default();
        if let Some(path) = path {
            let ini = ini::Ini::load_from_file(path).map_err(|e| match e {
                ini::Error::Io(io) => Error::Io(io),
                ini::Error::Parse(p) => Error::Config(format!("{}: {p}", path.display())),
            })?;
            for (section, props) in ini.iter() {
                let section = section.unwrap_or("general").to_ascii_lowercase();
                for (k, v) in props.iter() {
                    s.values.insert((section.clone(), k.to_ascii_lowercase()), v.trim().to_string());
                }
            }
        }
        s.overlay_env(std::env::vars());
        Ok(s)
    }

    /// Applies `MUI_LAB_SECTION__KEY=value` pairs.
    pub fn overlay_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            if let Some((section, key)) = rest.split_once("__") {
                self.values.insert((section.to_ascii_lowercase(), key.to_ascii_lowercase()), value);
            }
        }
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.values.get(&(section.to_string(), key.to_string())).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.raw(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("[{section}] {key} = {v:?} is not valid"))),
        }
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn list<T: FromStr + Clone>(&self, section: &str, key: &str, default: &[T]) -> Result<Vec<T>> {
        match self.raw(section, key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::Config(format!("[{section}] {key}: bad item {s:?}"))))
                .collect(),
        }
    }
}
