//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; unknown or repeated keys and malformed values are reported with
//! their line number. Command-line overrides go through the same setter
//! without a line number.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbone::PretrainConfig;
use crate::episodes::{DomainShift, Shots, SyntheticDomainSpec};
use crate::error::{Error, Result};
use crate::finetune::{Ablation, FinetuneConfig};
use crate::seed::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    Identity,
    /// Per-axis scales from `shift_low` to `shift_high`, common offset.
    Axis,
    /// Squash (`shift_low`) all directions but one random direction,
    /// stretch (`shift_high`) that one, offset along it.
    Skewed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub dim: usize,
    pub base_classes: usize,
    pub novel_classes: usize,
    pub base_samples: usize,
    pub novel_samples: usize,
    pub cluster_spread: f64,
    pub mean_scale: f64,
    pub shift: ShiftKind,
    pub shift_low: f64,
    pub shift_high: f64,
    pub shift_offset: f64,
    pub contamination: f64,
}

impl SyntheticSource {
    pub fn domain_spec(&self, run_seed: u64) -> SyntheticDomainSpec {
        let domain_shift = match self.shift {
            ShiftKind::Identity => DomainShift::identity(self.dim),
            ShiftKind::Axis => DomainShift::axis_scaled(self.dim, self.shift_low, self.shift_high, self.shift_offset),
            ShiftKind::Skewed => DomainShift::skewed(
                self.dim,
                self.shift_low,
                self.shift_high,
                self.shift_offset,
                seed::derive(run_seed, tag::SHIFT),
            ),
        };
        SyntheticDomainSpec {
            dim: self.dim,
            num_base_classes: self.base_classes,
            num_novel_classes: self.novel_classes,
            cluster_spread: self.cluster_spread,
            mean_scale: self.mean_scale,
            domain_shift,
            contamination_rate: self.contamination,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Raw digit labels used for pretraining.
    pub base_labels: Vec<usize>,
    /// Raw digit labels episodes are drawn from.
    pub novel_labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Idx(IdxSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// Load weights from here instead of pretraining.
    pub checkpoint: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub pretrain: PretrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub backbone: BackboneSpec,
    pub ways: usize,
    pub shots: Shots,
    pub queries: usize,
    pub episodes: usize,
    pub finetune: FinetuneConfig,
    /// Shot counts for the shot sweep.
    pub shot_list: Vec<usize>,
    /// Record per-epoch bias norms against population means (synthetic only).
    pub trace_bias: bool,
    /// Worker threads; 0 picks the machine default. Never affects results.
    #[serde(skip)]
    pub workers: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticSource {
                dim: 16,
                base_classes: 20,
                novel_classes: 20,
                base_samples: 100,
                novel_samples: 60,
                cluster_spread: 1.0,
                mean_scale: 1.0,
                shift: ShiftKind::Axis,
                shift_low: 0.2,
                shift_high: 5.0,
                shift_offset: 2.0,
                contamination: 0.1,
            }),
            backbone: BackboneSpec {
                checkpoint: None,
                hidden: vec![64],
                feature_dim: 32,
                pretrain: PretrainConfig::default(),
            },
            ways: 5,
            shots: Shots::Fixed(5),
            queries: 15,
            episodes: 600,
            finetune: FinetuneConfig::default(),
            shot_list: vec![1, 5],
            trace_bias: false,
            workers: 0,
            seed: 0,
        }
    }
}

/// Keys accepted in config files and `--set`, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "synthetic | idx"),
    ("dim", "synthetic input dimension"),
    ("base_classes", "synthetic base classes"),
    ("novel_classes", "synthetic novel classes"),
    ("base_samples", "examples per base class"),
    ("novel_samples", "examples per novel class"),
    ("cluster_spread", "per-class standard deviation"),
    ("mean_scale", "standard deviation of class means"),
    ("shift", "identity | axis | skewed"),
    ("shift_low", "axis: smallest axis scale; skewed: squash"),
    ("shift_high", "axis: largest axis scale; skewed: stretch"),
    ("shift_offset", "translation applied by the shift"),
    ("contamination", "probability a novel draw is strayed"),
    ("idx_images", "IDX image file"),
    ("idx_labels", "IDX label file"),
    ("base_labels", "comma-separated raw labels for pretraining"),
    ("novel_labels", "comma-separated raw labels for episodes"),
    ("checkpoint", "backbone checkpoint to load instead of pretraining"),
    ("hidden", "comma-separated hidden widths"),
    ("feature_dim", "backbone output width"),
    ("pretrain_lr", "pretraining learning rate"),
    ("pretrain_epochs", "pretraining epochs"),
    ("pretrain_batch", "pretraining minibatch size"),
    ("pretrain_momentum", "pretraining momentum"),
    ("ways", "classes per episode"),
    ("shots", "support examples per class: K or MIN-MAX"),
    ("queries", "query examples per class"),
    ("episodes", "episodes per row"),
    ("lr", "finetune learning rate"),
    ("epochs", "finetune epochs (full-batch steps)"),
    ("flags", "ablation row for `run`: none or B/FN/S/SS joined by +"),
    ("freeze_temperature", "true | false"),
    ("temperature_init", "initial cosine temperature"),
    ("refit_stats", "refit calibration statistics every epoch"),
    ("differentiate_stats", "backpropagate through the statistics"),
    ("sigma_walk", "selected-sampling step scale"),
    ("max_chain_len", "selected-sampling chain cap"),
    ("epsilon", "standard deviation floor"),
    ("trace_query", "record query metrics every epoch"),
    ("shot_list", "comma-separated shots for the shot sweep"),
    ("trace_bias", "record prototype bias norms (synthetic only)"),
    ("workers", "worker threads, 0 = default"),
    ("seed", "global seed"),
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid value `{value}` for `{key}` (expected true or false)")),
    }
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn parse_shots(value: &str) -> std::result::Result<Shots, String> {
    match value.split_once('-') {
        Some((a, b)) => Ok(Shots::Range {
            min: parse_num("shots", a.trim())?,
            max: parse_num("shots", b.trim())?,
        }),
        None => Ok(Shots::Fixed(parse_num("shots", value)?)),
    }
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    fn synthetic_mut(&mut self, key: &str) -> std::result::Result<&mut SyntheticSource, String> {
        match &mut self.data {
            DataSource::Synthetic(s) => Ok(s),
            DataSource::Idx(_) => Err(format!("`{key}` only applies to data = synthetic")),
        }
    }

    fn idx_mut(&mut self, key: &str) -> std::result::Result<&mut IdxSource, String> {
        match &mut self.data {
            DataSource::Idx(s) => Ok(s),
            DataSource::Synthetic(_) => Err(format!("`{key}` only applies to data = idx")),
        }
    }

    fn set_inner(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let ft = &mut self.finetune;
        match key {
            "data" => match value {
                "synthetic" => {
                    if !matches!(self.data, DataSource::Synthetic(_)) {
                        self.data = RunConfig::default().data;
                    }
                }
                "idx" => {
                    if !matches!(self.data, DataSource::Idx(_)) {
                        self.data = DataSource::Idx(IdxSource {
                            images: PathBuf::new(),
                            labels: PathBuf::new(),
                            base_labels: (0..8).collect(),
                            novel_labels: vec![8, 9],
                        });
                    }
                }
                _ => return Err(format!("invalid value `{value}` for `data` (expected synthetic or idx)")),
            },
            "dim" => self.synthetic_mut(key)?.dim = parse_num(key, value)?,
            "base_classes" => self.synthetic_mut(key)?.base_classes = parse_num(key, value)?,
            "novel_classes" => self.synthetic_mut(key)?.novel_classes = parse_num(key, value)?,
            "base_samples" => self.synthetic_mut(key)?.base_samples = parse_num(key, value)?,
            "novel_samples" => self.synthetic_mut(key)?.novel_samples = parse_num(key, value)?,
            "cluster_spread" => self.synthetic_mut(key)?.cluster_spread = parse_num(key, value)?,
            "mean_scale" => self.synthetic_mut(key)?.mean_scale = parse_num(key, value)?,
            "shift" => {
                self.synthetic_mut(key)?.shift = match value {
                    "identity" => ShiftKind::Identity,
                    "axis" => ShiftKind::Axis,
                    "skewed" => ShiftKind::Skewed,
                    _ => return Err(format!("invalid value `{value}` for `shift`")),
                }
            }
            "shift_low" => self.synthetic_mut(key)?.shift_low = parse_num(key, value)?,
            "shift_high" => self.synthetic_mut(key)?.shift_high = parse_num(key, value)?,
            "shift_offset" => self.synthetic_mut(key)?.shift_offset = parse_num(key, value)?,
            "contamination" => self.synthetic_mut(key)?.contamination = parse_num(key, value)?,
            "idx_images" => self.idx_mut(key)?.images = PathBuf::from(value),
            "idx_labels" => self.idx_mut(key)?.labels = PathBuf::from(value),
            "base_labels" => self.idx_mut(key)?.base_labels = parse_list(key, value)?,
            "novel_labels" => self.idx_mut(key)?.novel_labels = parse_list(key, value)?,
            "checkpoint" => {
                self.backbone.checkpoint = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "hidden" => self.backbone.hidden = parse_list(key, value)?,
            "feature_dim" => self.backbone.feature_dim = parse_num(key, value)?,
            "pretrain_lr" => self.backbone.pretrain.lr = parse_num(key, value)?,
            "pretrain_epochs" => self.backbone.pretrain.epochs = parse_num(key, value)?,
            "pretrain_batch" => self.backbone.pretrain.batch_size = parse_num(key, value)?,
            "pretrain_momentum" => self.backbone.pretrain.momentum = parse_num(key, value)?,
            "ways" => self.ways = parse_num(key, value)?,
            "shots" => self.shots = parse_shots(value)?,
            "queries" => self.queries = parse_num(key, value)?,
            "episodes" => self.episodes = parse_num(key, value)?,
            "lr" => ft.lr = parse_num(key, value)?,
            "epochs" => ft.epochs = parse_num(key, value)?,
            "flags" => ft.flags = Ablation::parse(value).map_err(|e| e.to_string())?,
            "freeze_temperature" => ft.freeze_temperature = parse_bool(key, value)?,
            "temperature_init" => ft.temperature_init = parse_num(key, value)?,
            "refit_stats" => ft.refit_stats = parse_bool(key, value)?,
            "differentiate_stats" => ft.differentiate_stats = parse_bool(key, value)?,
            "sigma_walk" => ft.sigma_walk = parse_num(key, value)?,
            "max_chain_len" => ft.max_chain_len = parse_num(key, value)?,
            "epsilon" => ft.epsilon = parse_num(key, value)?,
            "trace_query" => ft.trace_query = parse_bool(key, value)?,
            "shot_list" => self.shot_list = parse_list(key, value)?,
            "trace_bias" => self.trace_bias = parse_bool(key, value)?,
            "workers" => self.workers = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Sets one key, as from `--set key=value`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_inner(key.trim(), value.trim()).map_err(Error::Config)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(Error::ConfigParse {
                    line,
                    message: format!("expected `key = value`, got `{trimmed}`"),
                });
            };
            let key = key.trim();
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(Error::ConfigParse {
                    line,
                    message: format!("`{key}` already set on line {first}"),
                });
            }
            self.set_inner(key, value.trim())
                .map_err(|message| Error::ConfigParse { line, message })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key with its resolved value, readable back by `from_text`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        match &self.data {
            DataSource::Synthetic(s) => {
                put("data", "synthetic".into());
                put("dim", s.dim.to_string());
                put("base_classes", s.base_classes.to_string());
                put("novel_classes", s.novel_classes.to_string());
                put("base_samples", s.base_samples.to_string());
                put("novel_samples", s.novel_samples.to_string());
                put("cluster_spread", s.cluster_spread.to_string());
                put("mean_scale", s.mean_scale.to_string());
                let kind = match s.shift {
                    ShiftKind::Identity => "identity",
                    ShiftKind::Axis => "axis",
                    ShiftKind::Skewed => "skewed",
                };
                put("shift", kind.into());
                put("shift_low", s.shift_low.to_string());
                put("shift_high", s.shift_high.to_string());
                put("shift_offset", s.shift_offset.to_string());
                put("contamination", s.contamination.to_string());
            }
            DataSource::Idx(s) => {
                put("data", "idx".into());
                put("idx_images", s.images.display().to_string());
                put("idx_labels", s.labels.display().to_string());
                put("base_labels", join(&s.base_labels));
                put("novel_labels", join(&s.novel_labels));
            }
        }
        if let Some(p) = &self.backbone.checkpoint {
            put("checkpoint", p.display().to_string());
        }
        put("hidden", join(&self.backbone.hidden));
        put("feature_dim", self.backbone.feature_dim.to_string());
        let pre = &self.backbone.pretrain;
        put("pretrain_lr", pre.lr.to_string());
        put("pretrain_epochs", pre.epochs.to_string());
        put("pretrain_batch", pre.batch_size.to_string());
        put("pretrain_momentum", pre.momentum.to_string());
        put("ways", self.ways.to_string());
        put(
            "shots",
            match self.shots {
                Shots::Fixed(k) => k.to_string(),
                Shots::Range { min, max } => format!("{min}-{max}"),
            },
        );
        put("queries", self.queries.to_string());
        put("episodes", self.episodes.to_string());
        let ft = &self.finetune;
        put("lr", ft.lr.to_string());
        put("epochs", ft.epochs.to_string());
        put("flags", ft.flags.name());
        put("freeze_temperature", ft.freeze_temperature.to_string());
        put("temperature_init", ft.temperature_init.to_string());
        put("refit_stats", ft.refit_stats.to_string());
        put("differentiate_stats", ft.differentiate_stats.to_string());
        put("sigma_walk", ft.sigma_walk.to_string());
        put("max_chain_len", ft.max_chain_len.to_string());
        put("epsilon", ft.epsilon.to_string());
        put("trace_query", ft.trace_query.to_string());
        put("shot_list", join(&self.shot_list));
        put("trace_bias", self.trace_bias.to_string());
        put("workers", self.workers.to_string());
        put("seed", self.seed.to_string());
        out
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if self.ways < 2 {
            return Err(Error::Config("ways must be at least 2".into()));
        }
        if self.queries == 0 {
            return Err(Error::Config("queries must be at least 1 (empty query set)".into()));
        }
        if self.shots.min() == 0 || self.shots.min() > self.shots.max() {
            return Err(Error::Config(format!("invalid shots {}", self.shots)));
        }
        if self.shot_list.contains(&0) {
            return Err(Error::Config("shot_list entries must be at least 1".into()));
        }
        if self.backbone.feature_dim == 0 || self.backbone.hidden.contains(&0) {
            return Err(Error::Config("backbone widths must be at least 1".into()));
        }
        self.finetune.validate()?;
        match &self.data {
            DataSource::Synthetic(s) => {
                self.synthetic_spec(s).validate()?;
                if s.novel_classes < self.ways {
                    return Err(Error::Config(format!(
                        "{}-way episodes need at least {} novel classes, got {}",
                        self.ways, self.ways, s.novel_classes
                    )));
                }
                if s.base_classes < 2 {
                    return Err(Error::Config("base_classes must be at least 2".into()));
                }
            }
            DataSource::Idx(s) => {
                if s.novel_labels.len() < self.ways {
                    return Err(Error::Config(format!(
                        "{}-way episodes need at least {} novel labels",
                        self.ways, self.ways
                    )));
                }
                if s.base_labels.iter().any(|l| s.novel_labels.contains(l)) {
                    return Err(Error::Config("base_labels and novel_labels overlap".into()));
                }
            }
        }
        Ok(())
    }

    pub fn synthetic_spec(&self, s: &SyntheticSource) -> SyntheticDomainSpec {
        s.domain_spec(self.seed)
    }

    /// Input width of the data source, when known without reading files.
    pub fn input_dim(&self) -> Option<usize> {
        match &self.data {
            DataSource::Synthetic(s) => Some(s.dim),
            DataSource::Idx(_) => None,
        }
    }
}

/// One line per key with its description, for `--help`.
pub fn describe_keys() -> String {
    KEYS.iter().map(|(k, d)| format!("  {k:<20} {d}\n")).collect()
}
