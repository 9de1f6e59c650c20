//! `key = value` experiment files.
//!
//! Blank lines and lines starting with `#` are skipped. Keys are dotted
//! (`intra.max_iter`); unknown keys are rejected so typos surface early.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use torq::{AngleMode, CalibrationConfig, Pow2Mode, TorqError};

const KNOWN_KEYS: &[&str] = &[
    "format",
    "blocks",
    "lanes",
    "seed",
    "tokens",
    "dist",
    "scale_mode",
    "ridge",
    "inter.epsilon",
    "inter.max_sweeps",
    "inter.angle_mode",
    "intra.max_iter",
    "intra.epsilon",
    "intra.k_top",
    "intra.pairs",
    "intra.lambda",
    "intra.angle_sample_blocks",
    "intra.pow2_mode",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, TorqError> {
        let text = std::fs::read_to_string(path).map_err(|e| TorqError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, TorqError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TorqError::InvalidInput(format!("config line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(TorqError::InvalidInput(format!("config line {}: unknown key '{key}'", n + 1)));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(TorqError::InvalidInput(format!("config line {}: duplicate key '{key}'", n + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, TorqError> {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| TorqError::InvalidInput(format!("config key '{key}': cannot parse '{v}'")))
            })
            .transpose()
    }

    /// Flag value if given, otherwise the file's value.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, TorqError> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    /// Calibration settings with the file's `inter.*`, `intra.*` and `ridge`
    /// keys applied over the defaults.
    pub fn calibration(&self) -> Result<CalibrationConfig, TorqError> {
        let mut cfg = CalibrationConfig::default();
        if let Some(v) = self.get::<f64>("ridge")? {
            cfg.ridge = v;
        }
        if let Some(v) = self.get::<f64>("inter.epsilon")? {
            cfg.inter.epsilon = Some(v);
        }
        if let Some(v) = self.get::<usize>("inter.max_sweeps")? {
            cfg.inter.max_sweeps = Some(v);
        }
        if let Some(v) = self.get::<AngleMode>("inter.angle_mode")? {
            cfg.inter.angle_mode = v;
        }
        if let Some(v) = self.get::<usize>("intra.max_iter")? {
            cfg.intra.max_iter = v;
        }
        if let Some(v) = self.get::<f64>("intra.epsilon")? {
            cfg.intra.epsilon = v;
        }
        if let Some(v) = self.get::<usize>("intra.k_top")? {
            cfg.intra.k_top = Some(v);
        }
        if let Some(v) = self.get::<usize>("intra.pairs")? {
            cfg.intra.pairs = Some(v);
        }
        if let Some(v) = self.get::<f64>("intra.lambda")? {
            cfg.intra.lambda = v;
        }
        if let Some(v) = self.get::<usize>("intra.angle_sample_blocks")? {
            cfg.intra.angle_sample_blocks = Some(v);
        }
        if let Some(v) = self.get::<Pow2Mode>("intra.pow2_mode")? {
            cfg.intra.pow2_mode = v;
        }
        Ok(cfg)
    }
}
