//! Flat `key = value` configuration text.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Keys are
//! dotted names such as `swin.window`; list values are comma separated, and a
//! single value given for a 3-vector is used on every axis.

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::str::FromStr;

use crate::cnn::CnnConfig;
use crate::data::{SplitRatios, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};
use crate::swin::{SwinConfig, STAGES};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
    used: std::collections::BTreeSet<String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            if entries.insert(k.to_string(), (v.to_string(), no + 1)).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", no + 1)));
            }
        }
        Ok(Self {
            entries,
            used: Default::default(),
        })
    }

    /// Overrides or adds one entry (used for command-line `--set key=value`).
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn raw(&mut self, key: &str) -> Option<(String, usize)> {
        let v = self.entries.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} (line {line}): {e}"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|e| Error::Config(format!("{key} (line {line}): {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn take_array<T: FromStr + Copy, const N: usize>(&mut self, key: &str, default: [T; N]) -> Result<[T; N]>
    where
        T::Err: Display,
    {
        match self.take_list::<T>(key)? {
            None => Ok(default),
            Some(v) if v.len() == 1 => Ok([v[0]; N]),
            Some(v) => v
                .try_into()
                .map_err(|v: Vec<T>| Error::Config(format!("{key}: expected 1 or {N} values, got {}", v.len()))),
        }
    }

    /// Fails on any key that was never read.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key(s): {}", unknown.join(", "))))
        }
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Renders ordered entries as config text.
pub fn render(entries: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

impl ModelConfig {
    /// Reads `model.*`, `cnn.*` and `swin.*` keys over `self` as defaults.
    pub fn read_keys(mut self, kv: &mut KeyValues) -> Result<Self> {
        self.mode = kv.take_or("model.mode", self.mode)?;
        let cin = kv.take_or("model.in_channels", self.in_channels)?;
        let k = kv.take_or("model.num_classes", self.num_classes)?;
        self = self.with_io(cin, k);
        self.cnn.levels = kv.take_or("cnn.levels", self.cnn.levels)?;
        self.cnn.base_channels = kv.take_or("cnn.base_channels", self.cnn.base_channels)?;
        self.cnn.kernel = kv.take_or("cnn.kernel", self.cnn.kernel)?;
        self.cnn.leaky_slope = kv.take_or("cnn.leaky_slope", self.cnn.leaky_slope)?;
        self.swin.patch = kv.take_array("swin.patch", self.swin.patch)?;
        self.swin.embed_dim = kv.take_or("swin.embed_dim", self.swin.embed_dim)?;
        self.swin.heads = kv.take_array::<usize, STAGES>("swin.heads", self.swin.heads)?;
        self.swin.window = kv.take_array("swin.window", self.swin.window)?;
        self.swin.mlp_ratio = kv.take_or("swin.mlp_ratio", self.swin.mlp_ratio)?;
        self.swin.use_relative_bias = kv.take_or("swin.relative_bias", self.swin.use_relative_bias)?;
        Ok(self)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let CnnConfig {
            levels,
            base_channels,
            kernel,
            leaky_slope,
            ..
        } = self.cnn;
        let SwinConfig {
            patch,
            embed_dim,
            heads,
            window,
            mlp_ratio,
            use_relative_bias,
            ..
        } = self.swin;
        [
            ("model.mode", self.mode.to_string()),
            ("model.in_channels", self.in_channels.to_string()),
            ("model.num_classes", self.num_classes.to_string()),
            ("cnn.levels", levels.to_string()),
            ("cnn.base_channels", base_channels.to_string()),
            ("cnn.kernel", kernel.to_string()),
            ("cnn.leaky_slope", leaky_slope.to_string()),
            ("swin.patch", join(&patch)),
            ("swin.embed_dim", embed_dim.to_string()),
            ("swin.heads", join(&heads)),
            ("swin.window", join(&window)),
            ("swin.mlp_ratio", mlp_ratio.to_string()),
            ("swin.relative_bias", use_relative_bias.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_text(&self) -> String {
        render(&self.entries())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = ModelConfig::default().read_keys(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SynthSpec {
    /// Reads `data.*` generator keys over `self` as defaults.
    pub fn read_keys(mut self, kv: &mut KeyValues) -> Result<Self> {
        self.seed = kv.take_or("data.seed", self.seed)?;
        self.shape = kv.take_array("data.shape", self.shape)?;
        self.num_classes = kv.take_or("data.classes", self.num_classes)?;
        self.noise = kv.take_or("data.noise", self.noise)?;
        match kv.take_list::<f64>("data.contrast")? {
            Some(c) => self.contrast = c,
            None if self.contrast.len() != self.num_classes => {
                self.contrast = default_contrast(self.num_classes);
            }
            None => {}
        }
        self.cases = kv.take_or("data.cases", self.cases)?;
        self.spacing = kv.take_array("data.spacing", self.spacing)?;
        self.validate()?;
        Ok(self)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        [
            ("data.seed", self.seed.to_string()),
            ("data.shape", join(&self.shape)),
            ("data.classes", self.num_classes.to_string()),
            ("data.noise", self.noise.to_string()),
            ("data.contrast", join(&self.contrast)),
            ("data.cases", self.cases.to_string()),
            ("data.spacing", join(&self.spacing)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Evenly spread class intensities in `[0.2, 0.8]`.
pub fn default_contrast(classes: usize) -> Vec<f64> {
    if classes < 2 {
        return vec![0.2; classes];
    }
    (0..classes)
        .map(|c| 0.2 + 0.6 * c as f64 / (classes - 1) as f64)
        .collect()
}

impl SplitRatios {
    pub fn read_keys(self, kv: &mut KeyValues) -> Result<Self> {
        let [train, val, test] = kv.take_array("data.split", [self.train, self.val, self.test])?;
        Ok(Self { train, val, test })
    }

    pub fn entry(&self) -> (String, String) {
        ("data.split".into(), join(&[self.train, self.val, self.test]))
    }
}

impl Mode {
    pub fn parse_list(s: &str) -> Result<Vec<Mode>> {
        s.split(',').map(|m| m.trim().parse()).collect()
    }
}
