//! Run configuration: a flat `key = value` text format plus `--set` overrides.
//!
//! ```text
//! # comments and blank lines are ignored
//! base_channels = 8
//! ordering = top_to_bottom
//! seeds = 0,1,2
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, GpmSettings, ModelConfig};
use crate::error::{io_err, GpmError, Result};
use crate::train::TrainConfig;

/// Where samples come from: generated scenes or pairing manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Prefix for relative manifest entries; falls back to `GPMSEG_DATA_ROOT`.
    pub root: Option<PathBuf>,
    /// Training manifest; synthetic scenes are used when absent.
    pub train_manifest: Option<PathBuf>,
    /// Named test sets as `name:path` pairs.
    pub test_manifests: Vec<(String, PathBuf)>,
    pub synth_count: usize,
    pub synth_test_count: usize,
    pub synth_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            train_manifest: None,
            test_manifests: Vec::new(),
            synth_count: 200,
            synth_test_count: 50,
            synth_seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub gpm: bool,
    /// Kept while `gpm` is off so that toggling it back restores them.
    pub gpm_settings: GpmSettings,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
    /// Data-parallel kernels; off gives the bitwise-reproducible sequential path.
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::new(64),
            gpm: true,
            gpm_settings: GpmSettings::default(),
            init_seed: 0,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs"),
            parallel: true,
        }
    }
}

/// Every recognised key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "base_channels",
    "gpm",
    "ordering",
    "gpm_scale",
    "kernel_size",
    "reduction",
    "similarity_scale",
    "init_seed",
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "t_max",
    "lr_min",
    "schedule",
    "image_size",
    "seeds",
    "loss",
    "patience",
    "augment",
    "val_fraction",
    "target_dsc",
    "eval_every",
    "data_root",
    "train_manifest",
    "test_manifests",
    "synth_count",
    "synth_test_count",
    "synth_seed",
    "out_dir",
    "parallel",
];

fn cfg_err(key: &str, reason: impl Into<String>) -> GpmError {
    GpmError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| cfg_err(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(cfg_err(key, format!("expected true or false, got `{value}`"))),
    }
}

/// `none` (or empty) maps to `None`.
fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn opt_text<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|v| v.to_string()).unwrap_or_else(|| "none".into())
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            gpm: self.gpm.then_some(self.gpm_settings),
            init_seed: self.init_seed,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "base_channels" => {
                let b: usize = parse(key, value)?;
                if b == 0 {
                    return Err(cfg_err(key, "must be positive"));
                }
                self.backbone.base_channels = b;
            }
            "gpm" => self.gpm = parse_bool(key, value)?,
            "ordering" => {
                let o = parse(key, value)?;
                self.gpm_settings.ordering = o;
            }
            "gpm_scale" => {
                let s: usize = parse(key, value)?;
                if s == 0 {
                    return Err(cfg_err(key, "must be positive"));
                }
                self.gpm_settings.scale_factor = s;
            }
            "kernel_size" => {
                let k: usize = parse(key, value)?;
                if k.is_multiple_of(2) {
                    return Err(cfg_err(key, "must be odd"));
                }
                self.gpm_settings.kernel_size = k;
            }
            "reduction" => {
                let r: usize = parse(key, value)?;
                if r == 0 {
                    return Err(cfg_err(key, "must be positive"));
                }
                self.gpm_settings.reduction = r;
            }
            "similarity_scale" => {
                let s = parse(key, value)?;
                self.gpm_settings.similarity_scale = s;
            }
            "init_seed" => self.init_seed = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "t_max" => t.t_max = parse(key, value)?,
            "lr_min" => t.lr_min = parse(key, value)?,
            "schedule" => t.schedule = parse(key, value)?,
            "image_size" => {
                let s: usize = parse(key, value)?;
                if s == 0 || !s.is_multiple_of(crate::backbone::SIZE_DIVISOR) {
                    return Err(cfg_err(
                        key,
                        format!("must be a positive multiple of {}", crate::backbone::SIZE_DIVISOR),
                    ));
                }
                t.image_size = s;
            }
            "seeds" => {
                let seeds = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<u64>>>()?;
                if seeds.is_empty() {
                    return Err(cfg_err(key, "at least one seed is required"));
                }
                t.seeds = seeds;
            }
            "loss" => t.loss = parse(key, value)?,
            "patience" => t.early_stop_patience = parse_opt(key, value)?,
            "augment" => t.augment = parse_bool(key, value)?,
            "val_fraction" => t.val_fraction = parse(key, value)?,
            "target_dsc" => t.target_dsc = parse_opt(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "data_root" => self.data.root = (!value.is_empty() && value != "none").then(|| PathBuf::from(value)),
            "train_manifest" => {
                self.data.train_manifest = (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
            }
            "test_manifests" => {
                self.data.test_manifests = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && *s != "none")
                    .map(|item| match item.split_once(':') {
                        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
                            Ok((name.to_string(), PathBuf::from(path)))
                        }
                        _ => Err(cfg_err(key, format!("expected name:path, got `{item}`"))),
                    })
                    .collect::<Result<_>>()?
            }
            "synth_count" => self.data.synth_count = parse(key, value)?,
            "synth_test_count" => self.data.synth_test_count = parse(key, value)?,
            "synth_seed" => self.data.synth_seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "parallel" => self.parallel = parse_bool(key, value)?,
            _ => return Err(cfg_err(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(line, format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| cfg_err(o, "override must look like key=value"))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then overrides; validated.
    pub fn resolve<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|(key, reason)| cfg_err(key, reason))?;
        if self.data.train_manifest.is_none() && self.data.synth_count == 0 {
            return Err(cfg_err("synth_count", "must be positive when no train_manifest is set"));
        }
        Ok(())
    }

    /// Dataset prefix: `data_root`, else `GPMSEG_DATA_ROOT`, else the working directory.
    pub fn data_root(&self) -> PathBuf {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var_os("GPMSEG_DATA_ROOT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    /// The resolved configuration in the same text format.
    pub fn to_text(&self) -> String {
        let g = self.gpm_settings;
        let t = &self.train;
        let d = &self.data;
        let path_text = |p: &Option<PathBuf>| opt_text(&p.as_ref().map(|p| p.display().to_string()));
        let mut s = String::new();
        for key in KEYS {
            let value = match *key {
                "base_channels" => self.backbone.base_channels.to_string(),
                "gpm" => self.gpm.to_string(),
                "ordering" => g.ordering.as_str().to_string(),
                "gpm_scale" => g.scale_factor.to_string(),
                "kernel_size" => g.kernel_size.to_string(),
                "reduction" => g.reduction.to_string(),
                "similarity_scale" => match g.similarity_scale {
                    crate::gpm::SimilarityScale::Channels => "channels".into(),
                    crate::gpm::SimilarityScale::Tokens => "tokens".into(),
                },
                "init_seed" => self.init_seed.to_string(),
                "lr" => t.lr.to_string(),
                "weight_decay" => t.weight_decay.to_string(),
                "batch_size" => t.batch_size.to_string(),
                "epochs" => t.epochs.to_string(),
                "t_max" => t.t_max.to_string(),
                "lr_min" => t.lr_min.to_string(),
                "schedule" => t.schedule.as_str().to_string(),
                "image_size" => t.image_size.to_string(),
                "seeds" => t.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
                "loss" => t.loss.as_str().to_string(),
                "patience" => opt_text(&t.early_stop_patience),
                "augment" => t.augment.to_string(),
                "val_fraction" => t.val_fraction.to_string(),
                "target_dsc" => opt_text(&t.target_dsc),
                "eval_every" => t.eval_every.to_string(),
                "data_root" => path_text(&d.root),
                "train_manifest" => path_text(&d.train_manifest),
                "test_manifests" => {
                    if d.test_manifests.is_empty() {
                        "none".into()
                    } else {
                        d.test_manifests
                            .iter()
                            .map(|(n, p)| format!("{n}:{}", p.display()))
                            .collect::<Vec<_>>()
                            .join(",")
                    }
                }
                "synth_count" => d.synth_count.to_string(),
                "synth_test_count" => d.synth_test_count.to_string(),
                "synth_seed" => d.synth_seed.to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                "parallel" => self.parallel.to_string(),
                other => unreachable!("key {other} has no writer"),
            };
            writeln!(s, "{key} = {value}").unwrap();
        }
        s
    }
}
