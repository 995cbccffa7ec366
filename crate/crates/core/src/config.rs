//! Flat `key=value` run configuration, one pair per line with `#` comments.
//! The `preset` key fills every default first; other keys override it
//! regardless of their position in the file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{ModelConfig, TrainConfig};
use crate::synth::GenConfig;

pub const THREADS_ENV: &str = "GUICODER_THREADS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("duplicate config key `{0}`")]
    Duplicate(String),
    #[error("bad value for `{key}`: `{value}`")]
    BadValue { key: String, value: String },
    #[error("unknown preset `{0}` (expected desk or paper)")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub threads: usize,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, batch_size) = match preset {
            Preset::Desk => (ModelConfig::desk(), 8),
            Preset::Paper => (ModelConfig::paper(), 128),
        };
        RunConfig {
            preset,
            model,
            train: TrainConfig { batch_size, ..TrainConfig::default() },
            gen: GenConfig { image_size: model.image_size as u32, ..GenConfig::default() },
            threads: 1,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, message: format!("expected key=value, got `{line}`") })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.iter().any(|(seen, _)| *seen == k) {
                return Err(ConfigError::Duplicate(k));
            }
            pairs.push((k, v));
        }
        let preset = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Desk,
        };
        let mut cfg = RunConfig::preset(preset);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    /// Applies one key. The image size is shared by the model and generator.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
        }
        let (m, t, g) = (&mut self.model, &mut self.train, &mut self.gen);
        match key {
            "preset" => *self = RunConfig::preset(value.parse()?),
            "image_size" => {
                m.image_size = num(key, value)?;
                g.image_size = num(key, value)?;
            }
            "conv1" => m.conv_widths[0] = num(key, value)?,
            "conv2" => m.conv_widths[1] = num(key, value)?,
            "feature_dim" => m.conv_widths[2] = num(key, value)?,
            "hidden" => m.hidden = num(key, value)?,
            "embed" => m.embed = num(key, value)?,
            "attn_dim" => m.attn = num(key, value)?,
            "max_blocks" => m.max_blocks = num(key, value)?,
            "max_tokens" => m.max_tokens = num(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "lr" => t.adam.lr = num(key, value)?,
            "beta1" => t.adam.beta1 = num(key, value)?,
            "beta2" => t.adam.beta2 = num(key, value)?,
            "eps" => t.adam.eps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "max_steps" => t.max_steps = Some(num(key, value)?),
            "seed" => {
                t.seed = num(key, value)?;
                g.seed = t.seed;
            }
            "clip_norm" => t.clip_norm = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "min_rows" => g.min_rows = num(key, value)?,
            "max_rows" => g.max_rows = num(key, value)?,
            "min_leaves" => g.min_leaves = num(key, value)?,
            "max_leaves" => g.max_leaves = num(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(ConfigError::Invalid)?;
        self.gen.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.batch_size == 0 || self.threads == 0 {
            return Err(ConfigError::Invalid("batch_size and threads must be positive".into()));
        }
        if !(self.train.adam.lr > 0.0 && self.train.clip_norm > 0.0) {
            return Err(ConfigError::Invalid("lr and clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Lets `GUICODER_THREADS` override `threads`.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(THREADS_ENV) {
            self.set("threads", v.trim())?;
            self.validate()?;
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Desk)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (m, t, g) = (&self.model, &self.train, &self.gen);
        writeln!(f, "preset={}", self.preset.name())?;
        writeln!(f, "image_size={}", m.image_size)?;
        writeln!(f, "conv1={}\nconv2={}\nfeature_dim={}", m.conv_widths[0], m.conv_widths[1], m.conv_widths[2])?;
        writeln!(f, "hidden={}\nembed={}\nattn_dim={}", m.hidden, m.embed, m.attn)?;
        writeln!(f, "max_blocks={}\nmax_tokens={}\ndropout={}", m.max_blocks, m.max_tokens, m.dropout)?;
        writeln!(f, "lr={}\nbeta1={}\nbeta2={}\neps={}", t.adam.lr, t.adam.beta1, t.adam.beta2, t.adam.eps)?;
        writeln!(f, "batch_size={}\nepochs={}", t.batch_size, t.epochs)?;
        if let Some(s) = t.max_steps {
            writeln!(f, "max_steps={s}")?;
        }
        writeln!(f, "seed={}\nclip_norm={}\nthreads={}", t.seed, t.clip_norm, self.threads)?;
        write!(f, "min_rows={}\nmax_rows={}\nmin_leaves={}\nmax_leaves={}", g.min_rows, g.max_rows, g.min_leaves, g.max_leaves)
    }
}
