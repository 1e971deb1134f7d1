//! Experiment configuration files.
//!
//! The format is line based:
//!
//! ```text
//! # comment
//! [model]
//! encoder = mobilenet
//! decoder = skipnet
//!
//! [data]
//! dataset = synthetic
//! resolution = 64x128
//! ```
//!
//! Keys before the first section header belong to the unnamed section `""`.
//! Unknown sections or keys are rejected so that typos surface early.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use segbench_core::data::{Normalization, Split};
use segbench_core::meta_arch::{DecoderKind, DEFAULT_NUM_CLASSES};
use segbench_core::training::{OptimSpec, DEFAULT_WEIGHT_CONSTANT};
use segbench_core::zoo::{EncoderKind, EncoderOptions};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigEntry {
    pub line: usize,
    pub value: String,
}

/// Parsed but uninterpreted config: `section.key` to value.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigDoc {
    pub entries: BTreeMap<String, ConfigEntry>,
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

pub fn parse_config(text: &str) -> Result<ConfigDoc> {
    let mut doc = ConfigDoc::default();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                message: "unterminated section header".into(),
            })?;
            let name = name.trim();
            if !is_ident(name) {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("bad section name `{name}`"),
                });
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = s.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: "expected `key = value`".into(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !is_ident(key) {
            return Err(ConfigError::Syntax {
                line,
                message: format!("bad key `{key}`"),
            });
        }
        if value.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                message: format!("empty value for `{key}`"),
            });
        }
        let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        if doc.entries.contains_key(&full) {
            return Err(ConfigError::Duplicate { line, key: full });
        }
        doc.entries.insert(
            full,
            ConfigEntry {
                line,
                value: value.to_string(),
            },
        );
    }
    Ok(doc)
}

/// Parses `HxW`, e.g. `360x640`.
pub fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .trim()
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    if h == 0 || w == 0 {
        return Err(format!("resolution `{s}` has a zero side"));
    }
    Ok((h, w))
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{s}`")),
    }
}

fn parse_list<T: FromStr<Err = String>>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cityscapes,
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "cityscapes" => Ok(Self::Cityscapes),
            _ => Err(format!("unknown dataset `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Cityscapes root; `SEGBENCH_DATA_ROOT` overrides it.
    pub root: PathBuf,
    pub train_split: Split,
    pub eval_split: Split,
    /// Synthetic only.
    pub num_images: usize,
    /// Synthetic only.
    pub classes: usize,
    /// Synthetic only; defaults to the run seed.
    pub seed: Option<u64>,
    pub resolution: (usize, usize),
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeSpec {
    pub encoders: Vec<EncoderKind>,
    pub decoders: Vec<DecoderKind>,
    pub resolution: (usize, usize),
    pub include_segnet: bool,
    pub include_external: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub encoder_options: EncoderOptions,
    /// Model output channels; `None` picks a default for the dataset.
    pub num_classes: Option<usize>,
    pub data: DatasetSpec,
    pub optim: OptimSpec,
    pub weight_constant: f64,
    pub steps: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub benchmark_runs: usize,
    pub benchmark_warmup: usize,
    pub analyze: AnalyzeSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::MobileNet,
            decoder: DecoderKind::SkipNet,
            encoder_options: EncoderOptions::default(),
            num_classes: None,
            data: DatasetSpec {
                kind: DatasetKind::Synthetic,
                root: PathBuf::from("data/cityscapes"),
                train_split: Split::Train,
                eval_split: Split::Val,
                num_images: 10,
                classes: 5,
                seed: None,
                resolution: (64, 128),
                normalization: Normalization::default(),
            },
            optim: OptimSpec::default(),
            weight_constant: DEFAULT_WEIGHT_CONSTANT,
            steps: 300,
            out: PathBuf::from("runs"),
            seed: 0,
            benchmark_runs: 10,
            benchmark_warmup: 2,
            analyze: AnalyzeSpec {
                encoders: EncoderKind::ALL.to_vec(),
                decoders: DecoderKind::ALL.to_vec(),
                resolution: (360, 640),
                include_segnet: true,
                include_external: true,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_doc(&parse_config(text)?)
    }

    pub fn from_doc(doc: &ConfigDoc) -> Result<Self> {
        let mut c = Self::default();
        for (key, entry) in &doc.entries {
            let v = entry.value.as_str();
            let value_err = |message: String| ConfigError::Value {
                line: entry.line,
                key: key.clone(),
                message,
            };
            let num = |v: &str| v.parse::<usize>().map_err(|e| value_err(e.to_string()));
            let real = |v: &str| v.parse::<f64>().map_err(|e| value_err(e.to_string()));
            let int = |v: &str| v.parse::<u64>().map_err(|e| value_err(e.to_string()));
            match key.as_str() {
                "model.encoder" => c.encoder = v.parse().map_err(value_err)?,
                "model.decoder" => c.decoder = v.parse().map_err(value_err)?,
                "model.num_classes" => c.num_classes = Some(num(v)?),
                "model.width_multiplier" => c.encoder_options.width_multiplier = real(v)?,
                "model.groups" => c.encoder_options.groups = num(v)?,
                "model.vgg_batchnorm" => c.encoder_options.vgg_batchnorm = parse_bool(v).map_err(value_err)?,
                "data.dataset" => c.data.kind = v.parse().map_err(value_err)?,
                "data.root" => c.data.root = PathBuf::from(v),
                "data.split" => c.data.train_split = v.parse().map_err(|e: segbench_core::data::DataError| value_err(e.to_string()))?,
                "data.eval_split" => {
                    c.data.eval_split = v.parse().map_err(|e: segbench_core::data::DataError| value_err(e.to_string()))?
                }
                "data.num_images" => c.data.num_images = num(v)?,
                "data.classes" => c.data.classes = num(v)?,
                "data.seed" => c.data.seed = Some(int(v)?),
                "data.resolution" => c.data.resolution = parse_resolution(v).map_err(value_err)?,
                "data.mean" => {
                    let m: Vec<f64> = v
                        .split(',')
                        .map(|p| p.trim().parse::<f64>().map_err(|e| value_err(e.to_string())))
                        .collect::<Result<_>>()?;
                    let mean: [f64; 3] = m.try_into().map_err(|_| value_err("expected three values".into()))?;
                    c.data.normalization = Normalization { mean };
                }
                "optim.learning_rate" => c.optim.learning_rate = real(v)?,
                "optim.l2_decay" => c.optim.l2_decay = real(v)?,
                "optim.batch_size" => c.optim.batch_size = num(v)?,
                "optim.beta1" => c.optim.beta1 = real(v)?,
                "optim.beta2" => c.optim.beta2 = real(v)?,
                "optim.epsilon" => c.optim.epsilon = real(v)?,
                "optim.weight_constant" => c.weight_constant = real(v)?,
                "run.steps" => c.steps = num(v)?,
                "run.seed" => c.seed = int(v)?,
                "run.out" => c.out = PathBuf::from(v),
                "benchmark.runs" => c.benchmark_runs = num(v)?,
                "benchmark.warmup" => c.benchmark_warmup = num(v)?,
                "analyze.encoders" => c.analyze.encoders = parse_list(v).map_err(value_err)?,
                "analyze.decoders" => c.analyze.decoders = parse_list(v).map_err(value_err)?,
                "analyze.resolution" => c.analyze.resolution = parse_resolution(v).map_err(value_err)?,
                "analyze.segnet" => c.analyze.include_segnet = parse_bool(v).map_err(value_err)?,
                "analyze.external" => c.analyze.include_external = parse_bool(v).map_err(value_err)?,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line: entry.line,
                        key: key.clone(),
                    })
                }
            }
        }
        c.optim.seed = c.seed;
        Ok(c)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.optim.seed = seed;
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    /// Output channels of the model.
    pub fn model_classes(&self) -> usize {
        self.num_classes.unwrap_or(match self.data.kind {
            DatasetKind::Synthetic => self.data.classes,
            DatasetKind::Cityscapes => DEFAULT_NUM_CLASSES,
        })
    }

    /// Checks needed before building and executing a model. Resolution is
    /// checked against the built model by the commands.
    pub fn validate_for_execution(&self) -> Result<()> {
        let eval_classes = match self.data.kind {
            DatasetKind::Synthetic => self.data.classes,
            DatasetKind::Cityscapes => segbench_core::data::NUM_EVAL_CLASSES,
        };
        if self.model_classes() < eval_classes {
            return Err(ConfigError::Invalid(format!(
                "model has {} classes but the dataset evaluates {eval_classes}",
                self.model_classes()
            )));
        }
        if self.data.kind == DatasetKind::Synthetic && self.data.num_images == 0 {
            return Err(ConfigError::Invalid("data.num_images must be >= 1".into()));
        }
        self.optim
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
