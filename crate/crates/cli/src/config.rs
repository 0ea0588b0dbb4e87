//! `key = value` configuration files and flag/config/default resolution.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use xmc_core::{Error, Result};

/// Every key a configuration file may set. Keys a command does not use are
/// ignored by it, so one file can serve a whole pipeline.
pub const KNOWN_KEYS: &[&str] = &[
    // synthetic corpus
    "classes",
    "train_per_class",
    "val_per_class",
    "test_per_class",
    "wild_per_class",
    "image_dim",
    "text_dim",
    "spread",
    "comment_signal",
    "comment_noise",
    "max_comments",
    // index
    "nlist",
    "m",
    "ks",
    "kmeans_iters",
    // search
    "k",
    "r",
    "nprobe",
    "scan",
    "alpha",
    "exact_rescore",
    "n",
    // training
    "iterations",
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "dropout_rate",
    "kl_weight",
    "scheme",
    "hidden",
    "attn_hidden",
    "validation_metric",
    "seed",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, (usize, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {line_no}: expected `key = value`")))?;
            let key = key.trim().replace('-', "_");
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("config line {line_no}: unknown key {key:?}")));
            }
            if value.is_empty() {
                return Err(Error::Config(format!("config line {line_no}: {key} has no value")));
            }
            if values.insert(key.clone(), (line_no, value.to_string())).is_some() {
                return Err(Error::Config(format!("config line {line_no}: {key} set twice")));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        match self.values.get(key) {
            None => Ok(None),
            Some((line, v)) => {
                v.parse().map(Some).map_err(|e| Error::Config(format!("config line {line}: bad value for {key}: {e}")))
            }
        }
    }

    /// Flag if given, else the file's value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    pub fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let c = ConfigFile::parse("# header\n\nk = 3  # inline\nlr=0.5\nexact-rescore = false\n").unwrap();
        assert_eq!(c.get::<usize>("k").unwrap(), Some(3));
        assert_eq!(c.get::<f64>("lr").unwrap(), Some(0.5));
        assert_eq!(c.get::<bool>("exact_rescore").unwrap(), Some(false));
        assert_eq!(c.get::<usize>("n").unwrap(), None);
    }

    #[test]
    fn rejects_bad_lines() {
        for bad in ["bogus = 1", "k", "k =", "k = 1\nk = 2"] {
            assert!(matches!(ConfigFile::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        let c = ConfigFile::parse("k = three").unwrap();
        assert!(matches!(c.get::<usize>("k"), Err(Error::Config(_))));
    }

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let c = ConfigFile::parse("k = 3").unwrap();
        assert_eq!(c.pick(Some(7), "k", 5).unwrap(), 7);
        assert_eq!(c.pick(None, "k", 5).unwrap(), 3);
        assert_eq!(c.pick(None, "n", 5).unwrap(), 5);
    }
}
