//! Flat `key: value` experiment configuration.
//!
//! One setting per line; blank lines and lines starting with `#` are
//! ignored. Every key is optional and falls back to the chosen preset.
//! Unknown or repeated keys are rejected. See [`KEYS`] for the schema.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use biadapt_core::losses::LossWeights;
use biadapt_core::nets::{BackboneConfig, BackboneKind};
use biadapt_core::synthdata::ManipKind;
use biadapt_core::trainer::{Adapter, BackwardObjective, TeacherUpdate, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("line {line}: key `{key}`: {message}")]
    Key {
        line: usize,
        key: String,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Where a domain's images come from: a built-in generator or a directory
/// (`real/` + `fake/` subfolders when labeled, flat otherwise).
#[derive(Clone, Debug, PartialEq)]
pub enum DomainSource {
    Synthetic(ManipKind),
    Directory(PathBuf),
}

impl DomainSource {
    /// Generator names map to synthetic domains; anything else is a path.
    pub fn parse(s: &str) -> Self {
        match s.parse::<ManipKind>() {
            Ok(k) => DomainSource::Synthetic(k),
            Err(_) => DomainSource::Directory(PathBuf::from(s)),
        }
    }
}

impl fmt::Display for DomainSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainSource::Synthetic(k) => write!(f, "{k}"),
            DomainSource::Directory(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub source: DomainSource,
    pub targets: Vec<DomainSource>,
    pub data_seed: u64,
    /// Real images per synthetic domain (train + test).
    pub n_real: usize,
    /// Fake images per synthetic domain (train + test).
    pub n_fake: usize,
    pub train_fraction: f64,
    /// Downsample the majority class of directory domains.
    pub balance_classes: bool,
}

impl ScenarioSpec {
    pub fn name(&self) -> String {
        let short = |d: &DomainSource| match d {
            DomainSource::Synthetic(k) => k.name().to_string(),
            DomainSource::Directory(p) => p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dir".into()),
        };
        let targets: Vec<String> = self.targets.iter().map(short).collect();
        format!("{}->{}", short(&self.source), targets.join("+"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub scenario: ScenarioSpec,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub evaluate: bool,
    /// Grad-CAM maps written per domain and stage; 0 disables them.
    pub heatmaps: usize,
    pub overwrite: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    PaperParity,
    /// Desk settings with forward alignment switched off.
    Baseline,
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-parity" => Ok(Preset::PaperParity),
            "baseline" => Ok(Preset::Baseline),
            _ => Err(ConfigError::Invalid(format!(
                "unknown preset `{s}` (expected desk, paper-parity or baseline)"
            ))),
        }
    }
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        t1: 20,
        t2: 5,
        lr_forward: 0.003,
        lr_backward: 0.0003,
        ..TrainConfig::paper_parity()
    }
}

impl Preset {
    pub fn spec(self) -> ExperimentSpec {
        let desk = ExperimentSpec {
            scenario: ScenarioSpec {
                source: DomainSource::Synthetic(ManipKind::PatchSwap),
                targets: vec![DomainSource::Synthetic(ManipKind::LocalWarp)],
                data_seed: 0,
                n_real: 320,
                n_fake: 320,
                train_fraction: 0.8,
                balance_classes: false,
            },
            backbone: BackboneConfig::desk(),
            train: desk_train(),
            out_dir: PathBuf::from("runs/desk"),
            evaluate: true,
            heatmaps: 4,
            overwrite: false,
        };
        match self {
            Preset::Desk => desk,
            Preset::PaperParity => ExperimentSpec {
                backbone: BackboneConfig::paper_parity(),
                train: TrainConfig::paper_parity(),
                out_dir: PathBuf::from("runs/paper-parity"),
                ..desk
            },
            Preset::Baseline => ExperimentSpec {
                train: TrainConfig {
                    weights: LossWeights {
                        alpha2: 0.0,
                        ..desk.train.weights
                    },
                    adapter: Adapter::None,
                    ..desk.train.clone()
                },
                out_dir: PathBuf::from("runs/baseline"),
                ..desk
            },
        }
    }
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "source",
    "targets",
    "data_seed",
    "n_real",
    "n_fake",
    "train_fraction",
    "balance_classes",
    "backbone",
    "image_side",
    "visual_layers",
    "freq_layers",
    "embed_dim",
    "heads",
    "mlp_ratio",
    "patch",
    "freq_channels",
    "freq_depth",
    "disc_hidden",
    "dropout",
    "alpha1",
    "alpha2",
    "alpha3",
    "alpha4",
    "tau",
    "t1",
    "t2",
    "lr_forward",
    "lr_backward",
    "momentum",
    "weight_decay",
    "batch_forward",
    "batch_backward",
    "seed",
    "adapter",
    "backward_objective",
    "teacher_update",
    "ema_decay",
    "detach_teacher",
    "train_classifier_backward",
    "out_dir",
    "evaluate",
    "heatmaps",
    "overwrite",
];

fn parse_as<T: FromStr>(v: &str, what: &str) -> Result<T, String> {
    v.parse::<T>()
        .map_err(|_| format!("expected {what}, got `{v}`"))
}

fn real(v: &str) -> Result<f64, String> {
    let x: f64 = parse_as(v, "a number")?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("expected a finite number, got `{v}`"))
    }
}

fn positive(v: &str) -> Result<f64, String> {
    let x = real(v)?;
    if x > 0.0 {
        Ok(x)
    } else {
        Err(format!("must be positive, got {x}"))
    }
}

fn non_negative(v: &str) -> Result<f64, String> {
    let x = real(v)?;
    if x >= 0.0 {
        Ok(x)
    } else {
        Err(format!("must be non-negative, got {x}"))
    }
}

fn count(v: &str) -> Result<usize, String> {
    parse_as(v, "a non-negative integer")
}

fn boolean(v: &str) -> Result<bool, String> {
    parse_as(v, "`true` or `false`")
}

fn named<T: FromStr>(v: &str, options: &str) -> Result<T, String> {
    v.parse::<T>()
        .map_err(|_| format!("expected one of {options}, got `{v}`"))
}

impl ExperimentSpec {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let s = &mut self.scenario;
        let b = &mut self.backbone;
        let t = &mut self.train;
        let w = &mut t.weights;
        match key {
            "source" => s.source = DomainSource::parse(value),
            "targets" => {
                let list: Vec<DomainSource> = value
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(DomainSource::parse)
                    .collect();
                if list.is_empty() {
                    return Err("needs at least one target domain".into());
                }
                s.targets = list;
            }
            "data_seed" => s.data_seed = parse_as(value, "an unsigned integer")?,
            "n_real" => s.n_real = count(value)?,
            "n_fake" => s.n_fake = count(value)?,
            "train_fraction" => {
                let f = real(value)?;
                if !(f > 0.0 && f < 1.0) {
                    return Err(format!("must lie strictly between 0 and 1, got {f}"));
                }
                s.train_fraction = f;
            }
            "balance_classes" => s.balance_classes = boolean(value)?,
            "backbone" => b.kind = named::<BackboneKind>(value, "dual_vit, tiny_vit, tiny_cnn")?,
            "image_side" => b.image_side = count(value)?,
            "visual_layers" => b.visual_layers = count(value)?,
            "freq_layers" => b.freq_layers = count(value)?,
            "embed_dim" => b.embed_dim = count(value)?,
            "heads" => b.heads = count(value)?,
            "mlp_ratio" => b.mlp_ratio = count(value)?,
            "patch" => b.patch = count(value)?,
            "freq_channels" => b.freq_channels = count(value)?,
            "freq_depth" => b.freq_depth = count(value)?,
            "disc_hidden" => b.disc_hidden = count(value)?,
            "dropout" => {
                let p = non_negative(value)?;
                if p >= 1.0 {
                    return Err(format!("must lie in [0, 1), got {p}"));
                }
                b.dropout = p;
            }
            "alpha1" => w.alpha1 = non_negative(value)?,
            "alpha2" => w.alpha2 = non_negative(value)?,
            "alpha3" => w.alpha3 = non_negative(value)?,
            "alpha4" => w.alpha4 = non_negative(value)?,
            "tau" => w.tau = positive(value)?,
            "t1" => t.t1 = count(value)?,
            "t2" => t.t2 = count(value)?,
            "lr_forward" => t.lr_forward = positive(value)?,
            "lr_backward" => t.lr_backward = positive(value)?,
            "momentum" => {
                let m = non_negative(value)?;
                if m >= 1.0 {
                    return Err(format!("must lie in [0, 1), got {m}"));
                }
                t.momentum = m;
            }
            "weight_decay" => t.weight_decay = non_negative(value)?,
            "batch_forward" => t.batch_forward = count(value)?,
            "batch_backward" => t.batch_backward = count(value)?,
            "seed" => t.seed = parse_as(value, "an unsigned integer")?,
            "adapter" => t.adapter = named::<Adapter>(value, "FA, GRL, MMD, none")?,
            "backward_objective" => {
                t.backward_objective = named::<BackwardObjective>(value, "SD, ENT, none")?
            }
            "teacher_update" => t.teacher_update = named::<TeacherUpdate>(value, "copy, ema")?,
            "ema_decay" => {
                let d = non_negative(value)?;
                if d > 1.0 {
                    return Err(format!("must lie in [0, 1], got {d}"));
                }
                t.ema_decay = d;
            }
            "detach_teacher" => t.detach_teacher = boolean(value)?,
            "train_classifier_backward" => t.train_classifier_backward = boolean(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "evaluate" => self.evaluate = boolean(value)?,
            "heatmaps" => self.heatmaps = count(value)?,
            "overwrite" => self.overwrite = boolean(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Textual value of one key; `None` for unknown keys.
    pub fn get(&self, key: &str) -> Option<String> {
        let (s, b, t) = (&self.scenario, &self.backbone, &self.train);
        let w = &t.weights;
        Some(match key {
            "source" => s.source.to_string(),
            "targets" => s.targets.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            "data_seed" => s.data_seed.to_string(),
            "n_real" => s.n_real.to_string(),
            "n_fake" => s.n_fake.to_string(),
            "train_fraction" => s.train_fraction.to_string(),
            "balance_classes" => s.balance_classes.to_string(),
            "backbone" => b.kind.to_string(),
            "image_side" => b.image_side.to_string(),
            "visual_layers" => b.visual_layers.to_string(),
            "freq_layers" => b.freq_layers.to_string(),
            "embed_dim" => b.embed_dim.to_string(),
            "heads" => b.heads.to_string(),
            "mlp_ratio" => b.mlp_ratio.to_string(),
            "patch" => b.patch.to_string(),
            "freq_channels" => b.freq_channels.to_string(),
            "freq_depth" => b.freq_depth.to_string(),
            "disc_hidden" => b.disc_hidden.to_string(),
            "dropout" => b.dropout.to_string(),
            "alpha1" => w.alpha1.to_string(),
            "alpha2" => w.alpha2.to_string(),
            "alpha3" => w.alpha3.to_string(),
            "alpha4" => w.alpha4.to_string(),
            "tau" => w.tau.to_string(),
            "t1" => t.t1.to_string(),
            "t2" => t.t2.to_string(),
            "lr_forward" => t.lr_forward.to_string(),
            "lr_backward" => t.lr_backward.to_string(),
            "momentum" => t.momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "batch_forward" => t.batch_forward.to_string(),
            "batch_backward" => t.batch_backward.to_string(),
            "seed" => t.seed.to_string(),
            "adapter" => t.adapter.to_string(),
            "backward_objective" => t.backward_objective.to_string(),
            "teacher_update" => t.teacher_update.to_string(),
            "ema_decay" => t.ema_decay.to_string(),
            "detach_teacher" => t.detach_teacher.to_string(),
            "train_classifier_backward" => t.train_classifier_backward.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "evaluate" => self.evaluate.to_string(),
            "heatmaps" => self.heatmaps.to_string(),
            "overwrite" => self.overwrite.to_string(),
            _ => return None,
        })
    }

    /// Sets the training seed and the data seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.scenario.data_seed = seed;
        self
    }

    /// Cross-field checks that single keys cannot express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: biadapt_core::Error| ConfigError::Invalid(e.to_string());
        if self.backbone.kind == BackboneKind::Mlp {
            return Err(ConfigError::Invalid("the mlp backbone cannot read images".into()));
        }
        self.backbone.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        let s = &self.scenario;
        if s.targets.is_empty() {
            return Err(ConfigError::Invalid("at least one target domain is required".into()));
        }
        let synthetic = std::iter::once(&s.source)
            .chain(&s.targets)
            .any(|d| matches!(d, DomainSource::Synthetic(_)));
        if synthetic && (s.n_real < 4 || s.n_fake < 4) {
            return Err(ConfigError::Invalid(format!(
                "synthetic domains need n_real and n_fake of at least 4, got {}/{}",
                s.n_real, s.n_fake
            )));
        }
        Ok(())
    }

    /// Canonical text form listing every key.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let v = self.get(key).expect("every schema key has a value");
            out.push_str(&format!("{key}: {v}\n"));
        }
        out
    }
}

/// Parses config text over the given preset.
pub fn parse_config_str(text: &str, preset: Preset) -> Result<ExperimentSpec, ConfigError> {
    let mut spec = preset.spec();
    let mut seen: Vec<&str> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once(':') else {
            return Err(ConfigError::Syntax {
                line,
                message: format!("expected `key: value`, got `{trimmed}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        let key_err = |message: String| ConfigError::Key {
            line,
            key: key.to_string(),
            message,
        };
        if seen.contains(&key) {
            return Err(key_err("repeated key".into()));
        }
        if !KEYS.contains(&key) {
            return Err(key_err("unknown key".into()));
        }
        spec.set(key, value).map_err(key_err)?;
        seen.push(key);
    }
    spec.validate()?;
    Ok(spec)
}

/// Reads and parses a config file over the given preset.
pub fn parse_config(path: &Path, preset: Preset) -> Result<ExperimentSpec, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text, preset)
}
