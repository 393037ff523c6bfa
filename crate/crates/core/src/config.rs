//! Line-oriented `key = value` configuration files.
//!
//! `#` starts a comment. The optional `root` key names the directory that
//! every path value is resolved against; it is itself relative to the file's
//! directory and defaults to it.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KeyValueConfig {
    origin: String,
    root: PathBuf,
    entries: Vec<(String, String, usize)>,
}

impl KeyValueConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), &dir)
    }

    /// Parses `text`; `base` is the directory a relative `root` refers to.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, found `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            ensure!(!k.is_empty(), bad("empty key".into()));
            ensure!(
                !entries.iter().any(|(e, _, _)| e == k),
                bad(format!("duplicate key `{k}`"))
            );
            entries.push((k.to_string(), v.to_string(), i + 1));
        }
        let root = match entries.iter().find(|(k, _, _)| k == "root") {
            Some((_, v, _)) => base.join(v),
            None => base.to_path_buf(),
        };
        Ok(KeyValueConfig {
            origin: origin.to_string(),
            root,
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _, _)| k.as_str())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _, _)| k == key).map(|(_, v, _)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Parse {
            path: self.origin.clone(),
            line: 0,
            msg: format!("missing key `{key}`"),
        })
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.iter().find(|(k, _, _)| k == key).map_or(0, |(_, _, l)| *l)
    }

    fn parse_value<T: FromStr>(&self, key: &str, v: &str) -> Result<T>
    where
        T::Err: Display,
    {
        v.parse().map_err(|e: T::Err| Error::Parse {
            path: self.origin.clone(),
            line: self.line_of(key),
            msg: format!("bad value for `{key}`: {e}"),
        })
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(key) {
            Some(v) => self.parse_value(key, v),
            None => Ok(default),
        }
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.require(key)?;
        self.parse_value(key, v)
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(v) = self.get(key) else { return Ok(None) };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',').map(|s| self.parse_value(key, s.trim())).collect::<Result<_>>().map(Some)
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true" | "yes" | "on" | "1") => Ok(true),
            Some("false" | "no" | "off" | "0") => Ok(false),
            Some(v) => Err(Error::Parse {
                path: self.origin.clone(),
                line: self.line_of(key),
                msg: format!("bad boolean for `{key}`: {v}"),
            }),
        }
    }

    /// Resolves a path value against the root.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(self.root.join(self.require(key)?))
    }

    /// Keys sharing `prefix.`, in file order, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.entries.iter().filter_map(move |(k, v, _)| {
            k.strip_prefix(prefix)
                .and_then(|r| r.strip_prefix('.'))
                .map(|r| (r, v.as_str()))
        })
    }
}
