//! Experiment configuration: a flat, line-oriented `key = value` format
//! with dotted keys. Comma-separated lists on the factor keys define the
//! experiment matrix axes; every key has a validated default and unknown
//! keys are rejected.
//!
//! Factor keys (list-valued): `trigger.kind`, `trigger.alpha`,
//! `plan.lambda`, `plan.strategy`, `plan.poison_class`, `reg.kind`,
//! `reg.weight`. Everything else is single-valued.

use std::fs;
use std::path::{Path, PathBuf};

use poisonlab_core::model::{ConvBlockSpec, HeadPooling};
use poisonlab_core::regularize::RegKind;
use poisonlab_core::trigger::{TriggerKind, SQUARE_FRAC};

use crate::checkpoint::conv_blocks_from_text;
use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    Cifar10,
    TensorDir,
}

impl DatasetSource {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetSource::Synthetic => "synthetic",
            DatasetSource::Cifar10 => "cifar10",
            DatasetSource::TensorDir => "tensor_dir",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub path: Option<PathBuf>,
    pub n_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Class subset for loaded datasets (empty keeps all classes).
    pub classes: Vec<usize>,
    /// Per-class image cap for loaded datasets (0 = unlimited).
    pub limit_per_class: usize,
}

/// Strategy axis value; one-to-one resolves its source class per poison
/// class at cell time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyChoice {
    ManyToOne,
    OneToOne,
}

impl StrategyChoice {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyChoice::ManyToOne => "many_to_one",
            StrategyChoice::OneToOne => "one_to_one",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub fractions: [f64; 3],
    pub inner_split: f64,

    pub trigger_kinds: Vec<TriggerKind>,
    /// None = each kind's default transparency.
    pub alphas: Vec<Option<f32>>,
    pub side_frac: f32,
    pub offset_frac: f32,
    pub lv_threshold: f64,
    /// Subsample cap for the low-variance PCA fit.
    pub lv_fit_cap: usize,

    pub lambdas: Vec<f64>,
    pub strategies: Vec<StrategyChoice>,
    pub poison_classes: Vec<usize>,
    /// Source class for one-to-one poisoning; None = lowest class != t.
    pub source_class: Option<usize>,

    pub conv_blocks: Vec<ConvBlockSpec>,
    pub pooling: HeadPooling,
    pub hidden_dim: usize,

    pub batch_size: usize,
    pub learning_rate: f32,
    pub max_epochs: usize,
    pub patience: usize,
    pub retrain_epochs: usize,

    pub reg_kinds: Vec<RegKind>,
    pub reg_weights: Vec<f32>,
    pub margin: f32,
    pub temperature: f32,
    pub snnl_same_class: bool,

    pub repeats: usize,
    pub seed: u64,
    pub output: PathBuf,
    pub matrix_cap: usize,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig {
                source: DatasetSource::Synthetic,
                path: None,
                n_classes: 3,
                per_class: 600,
                height: 32,
                width: 32,
                seed: 7,
                classes: Vec::new(),
                limit_per_class: 0,
            },
            fractions: [0.76, 0.19, 0.05],
            inner_split: 0.8,
            trigger_kinds: vec![TriggerKind::Square],
            alphas: vec![None],
            side_frac: SQUARE_FRAC,
            offset_frac: SQUARE_FRAC,
            lv_threshold: 0.005,
            lv_fit_cap: 256,
            lambdas: vec![0.1],
            strategies: vec![StrategyChoice::ManyToOne],
            poison_classes: vec![0],
            source_class: None,
            conv_blocks: vec![
                ConvBlockSpec { filters: 8, kernel: 3, stride: 2 },
                ConvBlockSpec { filters: 16, kernel: 3, stride: 2 },
            ],
            pooling: HeadPooling::GlobalMax,
            hidden_dim: 64,
            batch_size: 32,
            learning_rate: 1e-5,
            max_epochs: 50,
            patience: 5,
            retrain_epochs: 10,
            reg_kinds: vec![RegKind::None],
            reg_weights: vec![1.0],
            margin: 1.0,
            temperature: 1.0,
            snnl_same_class: false,
            repeats: 1,
            seed: 42,
            output: PathBuf::from("results.csv"),
            matrix_cap: 4096,
            jobs: 1,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> LabResult<T> {
    value
        .trim()
        .parse()
        .map_err(|_| cfg_err(format!("bad value `{value}` for {key}")))
}

fn parse_list<T>(key: &str, value: &str, f: impl Fn(&str) -> LabResult<T>) -> LabResult<Vec<T>> {
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(cfg_err(format!("{key} lists no values")));
    }
    items.into_iter().map(f).collect()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> LabResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> LabResult<Self> {
        let mut cfg = ExperimentConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected key = value", ln + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| cfg_err(format!("line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> LabResult<()> {
        match key {
            "dataset.source" => {
                self.dataset.source = match value {
                    "synthetic" => DatasetSource::Synthetic,
                    "cifar10" => DatasetSource::Cifar10,
                    "tensor_dir" => DatasetSource::TensorDir,
                    other => return Err(cfg_err(format!("unknown dataset source `{other}`"))),
                }
            }
            "dataset.path" => self.dataset.path = Some(PathBuf::from(value)),
            "dataset.n_classes" => self.dataset.n_classes = parse_num(key, value)?,
            "dataset.per_class" => self.dataset.per_class = parse_num(key, value)?,
            "dataset.height" => self.dataset.height = parse_num(key, value)?,
            "dataset.width" => self.dataset.width = parse_num(key, value)?,
            "dataset.seed" => self.dataset.seed = parse_num(key, value)?,
            "dataset.classes" => {
                self.dataset.classes = parse_list(key, value, |v| parse_num(key, v))?
            }
            "dataset.limit_per_class" => self.dataset.limit_per_class = parse_num(key, value)?,
            "partition.fractions" => {
                let fs = parse_list(key, value, |v| parse_num::<f64>(key, v))?;
                if fs.len() != 3 {
                    return Err(cfg_err("partition.fractions needs three values"));
                }
                self.fractions = [fs[0], fs[1], fs[2]];
            }
            "partition.inner_split" => self.inner_split = parse_num(key, value)?,
            "trigger.kind" => {
                self.trigger_kinds =
                    parse_list(key, value, |v| TriggerKind::parse(v).map_err(LabError::from))?
            }
            "trigger.alpha" => {
                self.alphas = parse_list(key, value, |v| {
                    if v == "auto" {
                        Ok(None)
                    } else {
                        parse_num::<f32>(key, v).map(Some)
                    }
                })?
            }
            "trigger.side_frac" => self.side_frac = parse_num(key, value)?,
            "trigger.offset_frac" => self.offset_frac = parse_num(key, value)?,
            "trigger.lv_threshold" => self.lv_threshold = parse_num(key, value)?,
            "trigger.lv_fit_cap" => self.lv_fit_cap = parse_num(key, value)?,
            "plan.lambda" => self.lambdas = parse_list(key, value, |v| parse_num(key, v))?,
            "plan.strategy" => {
                self.strategies = parse_list(key, value, |v| match v {
                    "many_to_one" => Ok(StrategyChoice::ManyToOne),
                    "one_to_one" => Ok(StrategyChoice::OneToOne),
                    other => Err(cfg_err(format!("unknown strategy `{other}`"))),
                })?
            }
            "plan.poison_class" => {
                self.poison_classes = parse_list(key, value, |v| parse_num(key, v))?
            }
            "plan.source_class" => {
                self.source_class =
                    if value == "auto" { None } else { Some(parse_num(key, value)?) }
            }
            "model.conv" => self.conv_blocks = conv_blocks_from_text(value).map_err(cfg_err)?,
            "model.pooling" => self.pooling = HeadPooling::parse(value)?,
            "model.hidden_dim" => self.hidden_dim = parse_num(key, value)?,
            "train.batch_size" => self.batch_size = parse_num(key, value)?,
            "train.learning_rate" => self.learning_rate = parse_num(key, value)?,
            "train.max_epochs" => self.max_epochs = parse_num(key, value)?,
            "train.patience" => self.patience = parse_num(key, value)?,
            "train.retrain_epochs" => self.retrain_epochs = parse_num(key, value)?,
            "reg.kind" => {
                self.reg_kinds =
                    parse_list(key, value, |v| RegKind::parse(v).map_err(LabError::from))?
            }
            "reg.weight" => self.reg_weights = parse_list(key, value, |v| parse_num(key, v))?,
            "reg.margin" => self.margin = parse_num(key, value)?,
            "reg.temperature" => self.temperature = parse_num(key, value)?,
            "reg.snnl_same_class" => {
                self.snnl_same_class = match value {
                    "true" => true,
                    "false" => false,
                    other => return Err(cfg_err(format!("bad bool `{other}`"))),
                }
            }
            "repeats" => self.repeats = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "output" => self.output = PathBuf::from(value),
            "matrix.cap" => self.matrix_cap = parse_num(key, value)?,
            "jobs" => self.jobs = parse_num(key, value)?,
            other => return Err(cfg_err(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> LabResult<()> {
        let d = &self.dataset;
        match d.source {
            DatasetSource::Synthetic => {
                if d.n_classes == 0 || d.per_class == 0 || d.height == 0 || d.width == 0 {
                    return Err(cfg_err("synthetic dataset needs positive dimensions"));
                }
            }
            DatasetSource::Cifar10 | DatasetSource::TensorDir => {
                if d.path.is_none() {
                    return Err(cfg_err(format!("dataset.path is required for {}", d.source.name())));
                }
            }
        }
        let frac_sum: f64 = self.fractions.iter().sum();
        if (frac_sum - 1.0).abs() > 1e-9 {
            return Err(cfg_err(format!("partition fractions sum to {frac_sum}, expected 1")));
        }
        if self.inner_split.is_nan() || self.inner_split <= 0.0 || self.inner_split >= 1.0 {
            return Err(cfg_err(format!("inner split {} out of (0,1)", self.inner_split)));
        }
        for a in self.alphas.iter().flatten() {
            if !(0.0..=1.0).contains(a) {
                return Err(cfg_err(format!("alpha {a} out of [0,1]")));
            }
        }
        for l in &self.lambdas {
            if !(0.0..=1.0).contains(l) {
                return Err(cfg_err(format!("lambda {l} out of [0,1]")));
            }
        }
        if self.batch_size < 2 {
            return Err(cfg_err("train.batch_size must be >= 2"));
        }
        if self.patience < 1 {
            return Err(cfg_err("train.patience must be >= 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(cfg_err("train.learning_rate must be positive"));
        }
        if self.repeats == 0 {
            return Err(cfg_err("repeats must be >= 1"));
        }
        if self.reg_weights.iter().any(|w| *w < 0.0) {
            return Err(cfg_err("reg.weight must be >= 0"));
        }
        if !(self.margin > 0.0 && self.temperature > 0.0) {
            return Err(cfg_err("reg.margin and reg.temperature must be positive"));
        }
        if self.matrix_cap == 0 {
            return Err(cfg_err("matrix.cap must be >= 1"));
        }
        if self.jobs == 0 {
            return Err(cfg_err("jobs must be >= 1"));
        }
        Ok(())
    }

    /// Number of (factor combination, repeat) cells the matrix expands to.
    pub fn cell_count(&self) -> usize {
        self.trigger_kinds.len()
            * self.alphas.len()
            * self.lambdas.len()
            * self.strategies.len()
            * self.poison_classes.len()
            * self.reg_kinds.len()
            * self.reg_weights.len()
            * self.repeats
    }
}
