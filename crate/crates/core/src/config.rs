//! Declarative experiment configuration.
//!
//! Configs are TOML documents with nested sections. Command-line overrides
//! use dotted keys (`stage2.lr=0.01`) and are merged before deserializing,
//! so unknown keys and ill-typed values are rejected the same way whether
//! they come from the file or the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::sampling::Strategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every run, sampler, mixer and generator stream derives
    /// from it.
    pub seed: u64,
    /// Number of independent runs in a comparison.
    pub num_seeds: usize,
    pub batch_size: usize,
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub lmr: LmrConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// Hidden width of the `mlp` architecture; ignored for `linear`.
    pub hidden: usize,
    /// When false only the output layer is trained.
    pub train_extractor: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    /// Stage 2 falls back to `stage1.lr / 100` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub sampler: Strategy,
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmrConfig {
    pub w_rec: f64,
    pub decay: f64,
    pub p_mix: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Std of additive Gaussian noise on aggregated training features;
    /// 0 disables it.
    pub feature_noise: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Used when no dataset paths are given; regenerated per run seed.
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub scale: usize,
    pub d: usize,
    pub t: usize,
    pub alpha: f64,
    pub noise_std: f64,
    pub drift: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_seeds: 5,
            batch_size: 64,
            model: ModelConfig::default(),
            stage1: StageConfig {
                epochs: 100,
                lr: Some(DEFAULT_STAGE1_LR),
                momentum: 0.9,
                sampler: Strategy::Ib,
            },
            stage2: StageConfig {
                epochs: 75,
                lr: None,
                momentum: 0.9,
                sampler: Strategy::Cb,
            },
            lmr: LmrConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
        }
    }
}

pub const DEFAULT_STAGE1_LR: f64 = 0.07;
/// Stage 2 learning rate relative to stage 1.
pub const STAGE2_LR_RATIO: f64 = 0.01;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Linear,
            hidden: 64,
            train_extractor: true,
        }
    }
}

impl Default for LmrConfig {
    fn default() -> Self {
        Self {
            w_rec: 0.4,
            decay: 1.0,
            p_mix: 0.5,
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { feature_noise: 0.0 }
    }
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            scale: 10,
            d: 64,
            t: 7,
            alpha: 0.9,
            noise_std: 0.3,
            drift: 0.5,
        }
    }
}

impl ExperimentConfig {
    pub fn stage1_lr(&self) -> f64 {
        self.stage1.lr.unwrap_or(DEFAULT_STAGE1_LR)
    }

    pub fn stage2_lr(&self) -> f64 {
        self.stage2.lr.unwrap_or(self.stage1_lr() * STAGE2_LR_RATIO)
    }

    /// Copy with every defaulted value written out explicitly.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.stage1.lr = Some(self.stage1_lr());
        c.stage2.lr = Some(self.stage2_lr());
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        for (name, stage, lr) in [("stage1", &self.stage1, self.stage1_lr()), ("stage2", &self.stage2, self.stage2_lr())] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::invalid(format!("{name}.lr"), format!("{lr} must be > 0")));
            }
            if !(0.0..1.0).contains(&stage.momentum) {
                return Err(Error::invalid(format!("{name}.momentum"), "must be in [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.lmr.w_rec) {
            return Err(Error::invalid("lmr.w_rec", format!("{} not in [0, 1]", self.lmr.w_rec)));
        }
        if !(self.lmr.decay >= 0.0) || !self.lmr.decay.is_finite() {
            return Err(Error::invalid("lmr.decay", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.lmr.p_mix) {
            return Err(Error::invalid("lmr.p_mix", format!("{} not in [0, 1]", self.lmr.p_mix)));
        }
        if !(self.augment.feature_noise >= 0.0) {
            return Err(Error::invalid("augment.feature_noise", "must be >= 0"));
        }
        if self.model.arch == Architecture::Mlp && self.model.hidden == 0 {
            return Err(Error::invalid("model.hidden", "must be positive for mlp"));
        }
        if self.data.train.is_some() != self.data.test.is_some() {
            return Err(Error::invalid("data", "set both train and test paths, or neither"));
        }
        let s = &self.data.synthetic;
        if s.scale == 0 {
            return Err(Error::invalid("data.synthetic.scale", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&s.alpha) {
            return Err(Error::invalid("data.synthetic.alpha", format!("{} not in [0, 1]", s.alpha)));
        }
        Ok(())
    }

    /// LMR refinement needs at least one partner per sample.
    pub fn validate_for_lmr(&self) -> Result<()> {
        self.validate()?;
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", "must be >= 2 when LMR is enabled"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        Self::from_table(table)
    }

    /// Layers `table` over the serialized defaults so partial sections
    /// inherit their stage-specific defaults.
    fn from_table(table: toml::Table) -> Result<Self> {
        let mut base: toml::Table = toml::from_str(&Self::default().to_toml()).expect("defaults parse");
        merge(&mut base, table);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))
    }

    /// Reads an optional config file, applies `key=value` overrides, and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::ConfigParse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is parsed as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid("override", format!("{spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::invalid("override", "empty key"));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_owned()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().unwrap();
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::invalid(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
