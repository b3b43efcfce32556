//! Run configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::encoder::{Preset, ENCODER_STRIDE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    /// Width, height.
    pub input_size: (usize, usize),
    pub lr: f64,
    pub lr_factor: f64,
    /// Epochs at which the learning rate is multiplied by `lr_factor`.
    pub lr_milestones: Vec<usize>,
    pub epochs: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub w_seg: f64,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub block_gradients: bool,
    pub augment: bool,
    /// Checkpoint interval in steps; 0 keeps only the final checkpoint.
    pub save_every: usize,
    /// Stops early after this many steps.
    pub max_steps: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Full,
            input_size: (1024, 512),
            lr: 0.0005,
            lr_factor: 0.5,
            lr_milestones: vec![80, 160, 240],
            epochs: 320,
            momentum: 0.9,
            batch_size: 2,
            w_seg: 4.0,
            seed: 0,
            dataset: None,
            block_gradients: true,
            augment: true,
            save_every: 0,
            max_steps: None,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

/// Parses `WxH`.
pub fn parse_size(v: &str) -> Option<(usize, usize)> {
    let (w, h) = v.split_once('x')?;
    Some((w.trim().parse().ok()?, h.trim().parse().ok()?))
}

impl RunConfig {
    /// Learning rate for a zero-based epoch: `lr · factor^k` with `k` the
    /// number of milestones already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_factor.powi(k as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.input_size;
        for extent in [w, h] {
            if extent == 0 || extent % ENCODER_STRIDE != 0 {
                return Err(Error::Indivisible {
                    op: "input_size",
                    extent,
                    divisor: ENCODER_STRIDE,
                });
            }
        }
        let bad = |reason: &str| Err(Error::invalid("config", reason));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.lr_factor > 0.0) {
            return bad("lr_factor must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.w_seg > 0.0) {
            return bad("w_seg must be positive");
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::invalid("config", format!("bad value {value:?} for {key}"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad());
        match key {
            "preset" => self.preset = Preset::parse(value).ok_or_else(bad)?,
            "input_size" => self.input_size = parse_size(value).ok_or_else(bad)?,
            "lr" => self.lr = num(value)?,
            "lr_factor" => self.lr_factor = num(value)?,
            "lr_milestones" => {
                self.lr_milestones = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|m| int(m.trim())).collect::<Result<_>>()?
                }
            }
            "epochs" => self.epochs = int(value)?,
            "momentum" => self.momentum = num(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "w_seg" => self.w_seg = num(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "block_gradients" => self.block_gradients = parse_bool(value).ok_or_else(bad)?,
            "augment" => self.augment = parse_bool(value).ok_or_else(bad)?,
            "save_every" => self.save_every = int(value)?,
            "max_steps" => self.max_steps = if value.is_empty() { None } else { Some(int(value)?) },
            _ => return Err(Error::invalid("config", format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Overlays the settings of a config text on `self`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", origin, format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Text form that [`RunConfig::apply_text`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("preset", self.preset.name().into());
        kv("input_size", format!("{}x{}", self.input_size.0, self.input_size.1));
        kv("lr", self.lr.to_string());
        kv("lr_factor", self.lr_factor.to_string());
        kv(
            "lr_milestones",
            self.lr_milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("epochs", self.epochs.to_string());
        kv("momentum", self.momentum.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("w_seg", self.w_seg.to_string());
        kv("seed", self.seed.to_string());
        kv("dataset", self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("block_gradients", self.block_gradients.to_string());
        kv("augment", self.augment.to_string());
        kv("save_every", self.save_every.to_string());
        kv("max_steps", self.max_steps.map(|m| m.to_string()).unwrap_or_default());
        s
    }
}
