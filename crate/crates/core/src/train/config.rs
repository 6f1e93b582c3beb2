use std::fmt;
use std::path::PathBuf;

use crate::config::{parse_kv, parse_value, render_kv};
use crate::error::{Error, Result};
use crate::interventions::MaskConfig;
use crate::losses::{LossWeights, NecessityMode};
use crate::model::ModelConfig;

/// Every knob of a training run. Rendered as flat `key = value` text for
/// config files, logs and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub eta: f64,
    pub nec_mode: NecessityMode,
    /// Hinge margin, only used by `maximize_margin`.
    pub margin: f64,
    pub block_size: usize,
    pub mask_count_range: (usize, usize),
    pub pool_r: usize,
    pub attention_heads: usize,
    pub channels: [usize; 3],
    pub seed: u64,
    /// 0 means one pass over the training set: `ceil(len / batch_size)`.
    pub steps_per_epoch: usize,
    pub clip_norm: f64,
    pub deterministic: bool,
    pub data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let m = ModelConfig::default();
        let k = MaskConfig::default();
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-4,
            patch: 256,
            alpha: w.alpha,
            beta: w.beta,
            lambda1: w.lambda1,
            eta: w.eta,
            nec_mode: w.nec_mode,
            margin: w.margin,
            block_size: k.block_size,
            mask_count_range: (k.min_blocks, k.max_blocks),
            pool_r: m.pool_r,
            attention_heads: m.attention_heads,
            channels: m.channels,
            seed: 0,
            steps_per_epoch: 0,
            clip_norm: 10.0,
            deterministic: true,
            data: None,
            val_data: None,
            out_dir: PathBuf::from("runs"),
            resume: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "patch",
    "alpha",
    "beta",
    "lambda1",
    "eta",
    "nec_mode",
    "margin",
    "block_size",
    "mask_count_range",
    "pool_r",
    "attention_heads",
    "channels",
    "seed",
    "steps_per_epoch",
    "clip_norm",
    "deterministic",
    "data",
    "val_data",
    "out_dir",
    "resume",
];

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl TrainConfig {
    /// Sets one field from its textual form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "patch" => self.patch = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "lambda1" => self.lambda1 = parse_value(key, value)?,
            "eta" => self.eta = parse_value(key, value)?,
            "nec_mode" => self.nec_mode = value.parse()?,
            "margin" => self.margin = parse_value(key, value)?,
            "block_size" => self.block_size = parse_value(key, value)?,
            "mask_count_range" => {
                let (lo, hi) = value
                    .split_once('-')
                    .ok_or_else(|| Error::config(format!("`{key}` expects `min-max`, got {value:?}")))?;
                self.mask_count_range = (parse_value(key, lo.trim())?, parse_value(key, hi.trim())?);
            }
            "pool_r" => self.pool_r = parse_value(key, value)?,
            "attention_heads" => self.attention_heads = parse_value(key, value)?,
            "channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|c| parse_value(key, c.trim()))
                    .collect::<Result<_>>()?;
                self.channels = parts.try_into().map_err(|_| {
                    Error::config(format!("`{key}` expects three comma-separated widths, got {value:?}"))
                })?;
            }
            "seed" => self.seed = parse_value(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "deterministic" => self.deterministic = parse_value(key, value)?,
            "data" => self.data = opt_path(value),
            "val_data" => self.val_data = opt_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "resume" => self.resume = opt_path(value),
            other => {
                return Err(Error::config(format!(
                    "unknown config key `{other}` (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply(&parse_kv(text)?)?;
        Ok(c)
    }

    /// Every field in `KEYS` order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let ch = self.channels;
        let vals = [
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.learning_rate.to_string(),
            self.patch.to_string(),
            self.alpha.to_string(),
            self.beta.to_string(),
            self.lambda1.to_string(),
            self.eta.to_string(),
            self.nec_mode.to_string(),
            self.margin.to_string(),
            self.block_size.to_string(),
            format!("{}-{}", self.mask_count_range.0, self.mask_count_range.1),
            self.pool_r.to_string(),
            self.attention_heads.to_string(),
            format!("{},{},{}", ch[0], ch[1], ch[2]),
            self.seed.to_string(),
            self.steps_per_epoch.to_string(),
            self.clip_norm.to_string(),
            self.deterministic.to_string(),
            show_path(&self.data),
            show_path(&self.val_data),
            self.out_dir.display().to_string(),
            show_path(&self.resume),
        ];
        KEYS.iter().zip(vals).map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be a positive number"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config("eta must lie in [0, 1]"));
        }
        self.model_config().validate()?;
        self.mask_config().validate()?;
        let min = self.model_config().min_side();
        if self.patch < min {
            return Err(Error::config(format!(
                "patch {} is below {min}, the smallest side that keeps pool_r = {} positions at the coarsest scale",
                self.patch, self.pool_r
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            pool_r: self.pool_r,
            attention_heads: self.attention_heads,
            ..ModelConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            lambda1: self.lambda1,
            eta: self.eta,
            nec_mode: self.nec_mode,
            margin: self.margin,
        }
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            block_size: self.block_size,
            min_blocks: self.mask_count_range.0,
            max_blocks: self.mask_count_range.1,
            ..MaskConfig::default()
        }
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_kv(&self.to_kv()))
    }
}
