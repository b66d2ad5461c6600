//! The single run configuration file and its dotted-path overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bevtrack::metrics::EvalConfig;
use bevtrack::net::ModelConfig;
use bevtrack::sim::SimConfig;
use bevtrack::track::TrackerConfig;
use bevtrack::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training sequences written by `generate`.
    pub sequences: usize,
    /// Validation sequences used by `ablate` when no validation file is given.
    pub val_sequences: usize,
    /// Validation scenes are seeded from `seed + val_seed_offset`.
    pub val_seed_offset: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            sequences: 8,
            val_sequences: 4,
            val_seed_offset: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    /// Minimum score kept when decoding for AP curves.
    pub score_thr: f64,
    pub nms_thr: f64,
    /// Minimum score of detections handed to the trackers.
    pub track_score_thr: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_thr: 0.05,
            nms_thr: 0.1,
            track_score_thr: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub tracklets: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub points: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            points: 100_000,
            repeats: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Pixels per grid cell.
    pub scale: usize,
    pub svg: bool,
    /// Sequence to render.
    pub sequence: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            scale: 2,
            svg: false,
            sequence: 0,
        }
    }
}

/// Everything a run needs. `seed` is the master seed: the resolved config
/// copies it into `sim.seed` and `train.seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub detect: DetectConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub eval: EvalConfig,
    pub tracker: TrackerConfig,
    pub bench: BenchConfig,
    pub render: RenderConfig,
}

pub const VERSION: &str = concat!("bevtrack ", env!("CARGO_PKG_VERSION"));

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `key=value`
    /// overrides, then the seed flag, and validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut value: toml::Value = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).with_context(|| format!("cannot read config file {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("invalid config file {}", p.display()))?
            }
            None => toml::Value::try_from(RunConfig::default()).expect("default config serialises"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = value.try_into().context("config violates the schema")?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.sim.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("invalid [model] section")?;
        self.train.validate().context("invalid [train] section")?;
        self.sim.validate().context("invalid [sim] section")?;
        self.eval.validate().context("invalid [eval] section")?;
        if !(self.detect.nms_thr > 0.0 && self.detect.nms_thr <= 1.0) {
            bail!("invalid [detect] section: nms_thr must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.detect.score_thr) || !(0.0..=1.0).contains(&self.detect.track_score_thr) {
            bail!("invalid [detect] section: score thresholds must lie in [0, 1]");
        }
        if !(self.tracker.match_thr > 0.0 && self.tracker.match_thr <= 1.0) || !(self.tracker.decay > 0.0) {
            bail!("invalid [tracker] section: match_thr must lie in (0, 1] and decay be positive");
        }
        if self.render.scale == 0 || self.bench.repeats == 0 {
            bail!("render.scale and bench.repeats must be at least 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value`, creating intermediate tables. Unknown keys are
/// caught when the result is deserialised.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .with_context(|| format!("override `{key}`: `{p}` is not inside a table"))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .with_context(|| format!("override `{key}` does not address a table field"))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
