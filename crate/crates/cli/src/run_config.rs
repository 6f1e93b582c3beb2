use std::fmt;
use std::path::PathBuf;

use isfuse::config::{parse_kv, read_kv_file, render_kv};
use isfuse::train::{TrainConfig, KEYS as TRAIN_KEYS};
use isfuse::{Error, Result};

/// Training options plus the keys the other subcommands read. Resolution
/// order: defaults, then the `--config` file, then command-line flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub checkpoint: Option<PathBuf>,
    pub vi: Option<PathBuf>,
    pub ir: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub color: bool,
    pub fused_dir: Option<PathBuf>,
    pub json: bool,
    pub seeds: Vec<u64>,
    pub metric: String,
    pub chart: Option<PathBuf>,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            checkpoint: None,
            vi: None,
            ir: None,
            output: None,
            color: false,
            fused_dir: None,
            json: false,
            seeds: Vec::new(),
            metric: "all".into(),
            chart: None,
            samples: 4,
            height: 256,
            width: 256,
        }
    }
}

const EXTRA_KEYS: &[&str] = &[
    "checkpoint",
    "vi",
    "ir",
    "output",
    "color",
    "fused_dir",
    "json",
    "seeds",
    "metric",
    "chart",
    "samples",
    "height",
    "width",
];

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "checkpoint" => self.checkpoint = opt_path(value),
            "vi" => self.vi = opt_path(value),
            "ir" => self.ir = opt_path(value),
            "output" => self.output = opt_path(value),
            "color" => self.color = parse(key, value)?,
            "fused_dir" => self.fused_dir = opt_path(value),
            "json" => self.json = parse(key, value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "metric" => {
                let m = value.to_ascii_lowercase();
                if !["all", "psnr", "cc"].contains(&m.as_str()) {
                    return Err(Error::Config(format!(
                        "unknown metric {value:?} (expected all, psnr or cc)"
                    )));
                }
                self.metric = m;
            }
            "chart" => self.chart = opt_path(value),
            "samples" => self.samples = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            _ if TRAIN_KEYS.contains(&key) => self.train.set(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}` (known: {}, {})",
                    TRAIN_KEYS.join(", "),
                    EXTRA_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&std::path::Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(path) = file {
            for (k, v) in read_kv_file(path)? {
                c.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = self.train.to_kv();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let vals = [
            show(&self.checkpoint),
            show(&self.vi),
            show(&self.ir),
            show(&self.output),
            self.color.to_string(),
            show(&self.fused_dir),
            self.json.to_string(),
            seeds.join(","),
            self.metric.clone(),
            show(&self.chart),
            self.samples.to_string(),
            self.height.to_string(),
            self.width.to_string(),
        ];
        kv.extend(EXTRA_KEYS.iter().zip(vals).map(|(k, v)| (k.to_string(), v)));
        kv
    }

    /// Seeds for multi-seed commands: `seeds` if set, otherwise `seed`.
    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_kv(&self.to_kv()))
    }
}

/// Parses a rendered config back; used by tests.
#[allow(dead_code)]
pub fn parse_rendered(text: &str) -> Result<RunConfig> {
    RunConfig::resolve(None, &parse_kv(text)?)
}
