//! Run configuration: flat `key=value` text with `#` comments.
//!
//! Precedence, lowest first: built-in defaults, `STOPBAND_DATA_DIR`, the
//! config file, command-line flags.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use stopband_core::models::ModelSpec;
use stopband_core::trainer::{TrainConfig, TrainMode};
use stopband_core::{BudgetSpec, Real, ReparamConfig};

use crate::error::{CliError, CliResult};

pub const DATA_DIR_ENV: &str = "STOPBAND_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            _ => Err(format!("unknown dataset '{s}' (expected synthetic or cifar10)")),
        }
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub model_seed: u64,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Synthetic: samples to generate. CIFAR-10: random subset size, 0 for all.
    pub train_size: usize,
    pub test_size: usize,
    pub data_seed: u64,
    /// Synthetic data only.
    pub classes: usize,
    pub input_shape: Vec<usize>,
    pub margin: Real,
    /// Fraction of the training set held out for model selection; 0 selects
    /// on the test set.
    pub val_split: Real,
    pub prune_rate: Real,
    /// 0 trains the plain network.
    pub lambda: Real,
    pub n: u32,
    pub t_init: Real,
    pub epochs: usize,
    pub lr: Real,
    pub batch_size: usize,
    pub momentum: Real,
    pub weight_decay: Real,
    pub plateau_factor: Real,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub augment: bool,
}

pub const KEYS: &[&str] = &[
    "model",
    "model_seed",
    "dataset",
    "data_dir",
    "train_size",
    "test_size",
    "data_seed",
    "classes",
    "input_shape",
    "margin",
    "val_split",
    "prune_rate",
    "lambda",
    "n",
    "t_init",
    "epochs",
    "lr",
    "batch_size",
    "momentum",
    "weight_decay",
    "plateau_factor",
    "plateau_patience",
    "early_stop_patience",
    "seed",
    "augment",
];

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            model: "conv4-small".into(),
            model_seed: 0,
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            train_size: 2000,
            test_size: 1000,
            data_seed: 0,
            classes: 10,
            input_shape: vec![3, 8, 8],
            margin: 1.0,
            val_split: 0.0,
            prune_rate: 0.9,
            lambda: 5.0,
            n: 4,
            t_init: 100.0,
            epochs: t.epochs,
            lr: 0.03,
            batch_size: 64,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
            early_stop_patience: t.early_stop_patience,
            seed: t.seed,
            augment: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::usage(format!("invalid value '{value}' for '{key}'")))
}

fn parse_shape(value: &str) -> CliResult<Vec<usize>> {
    let dims: CliResult<Vec<usize>> = value.split('x').map(|d| parse("input_shape", d)).collect();
    match dims {
        Ok(d) if d.len() == 3 && d.iter().all(|&v| v > 0) => Ok(d),
        _ => Err(CliError::usage(format!("input_shape must look like 3x8x8, got '{value}'"))),
    }
}

impl RunConfig {
    /// Defaults with the data directory taken from the environment.
    pub fn from_env() -> Self {
        Self {
            data_dir: std::env::var_os(DATA_DIR_ENV).map(PathBuf::from),
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let value = value.trim();
        match key {
            "model" => self.model = value.to_string(),
            "model_seed" => self.model_seed = parse(key, value)?,
            "dataset" => self.dataset = value.parse().map_err(CliError::Usage)?,
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "train_size" => self.train_size = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "input_shape" => self.input_shape = parse_shape(value)?,
            "margin" => self.margin = parse(key, value)?,
            "val_split" => self.val_split = parse(key, value)?,
            "prune_rate" => self.prune_rate = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "n" => self.n = parse(key, value)?,
            "t_init" => self.t_init = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "plateau_factor" => self.plateau_factor = parse(key, value)?,
            "plateau_patience" => self.plateau_patience = parse(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            _ => return Err(CliError::usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies every `key=value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {} has no '=': {raw}", i + 1)))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(CliError::usage(format!("config key '{k}' given twice")));
            }
            seen.push(k);
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn value(&self, key: &str) -> String {
        match key {
            "model" => self.model.clone(),
            "model_seed" => self.model_seed.to_string(),
            "dataset" => self.dataset.to_string(),
            "data_dir" => self
                .data_dir
                .as_ref()
                .map_or_else(String::new, |p| p.display().to_string()),
            "train_size" => self.train_size.to_string(),
            "test_size" => self.test_size.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "classes" => self.classes.to_string(),
            "input_shape" => self
                .input_shape
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x"),
            "margin" => self.margin.to_string(),
            "val_split" => self.val_split.to_string(),
            "prune_rate" => self.prune_rate.to_string(),
            "lambda" => self.lambda.to_string(),
            "n" => self.n.to_string(),
            "t_init" => self.t_init.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "plateau_factor" => self.plateau_factor.to_string(),
            "plateau_patience" => self.plateau_patience.to_string(),
            "early_stop_patience" => self.early_stop_patience.to_string(),
            "seed" => self.seed.to_string(),
            "augment" => self.augment.to_string(),
            _ => unreachable!("not a config key: {key}"),
        }
    }

    /// The fully resolved config, one `key=value` per line in a fixed order.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.value(k))).collect()
    }

    pub fn mode(&self) -> TrainMode {
        if self.lambda == 0.0 {
            TrainMode::Plain
        } else {
            TrainMode::Reparam
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr_init: self.lr,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            early_stop_patience: self.early_stop_patience,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            momentum: self.momentum,
            seed: self.seed,
            mode: self.mode(),
            augment: self.augment,
        }
    }

    /// `None` for plain training.
    pub fn reparam(&self) -> CliResult<Option<ReparamConfig>> {
        match self.mode() {
            TrainMode::Reparam => Ok(Some(ReparamConfig::new(self.n, self.t_init)?)),
            _ => Ok(None),
        }
    }

    pub fn budget(&self, initial_cost: usize) -> CliResult<Option<BudgetSpec>> {
        match self.mode() {
            TrainMode::Reparam => Ok(Some(BudgetSpec::new(initial_cost as Real, self.prune_rate, self.lambda)?)),
            _ => Ok(None),
        }
    }

    /// `[C, H, W]` of the chosen dataset.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.dataset {
            DatasetKind::Synthetic => self.input_shape.clone(),
            DatasetKind::Cifar10 => vec![3, 32, 32],
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Synthetic => self.classes,
            DatasetKind::Cifar10 => 10,
        }
    }

    /// Checks every field; nothing is computed before this passes.
    pub fn validate(&self) -> CliResult<()> {
        self.train_config().validate()?;
        ModelSpec::named(&self.model, self.num_classes(), &self.sample_shape())?;
        if !(0.0..1.0).contains(&self.prune_rate) {
            return Err(CliError::usage(format!("prune_rate must be in [0, 1), got {}", self.prune_rate)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CliError::usage(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        ReparamConfig::new(self.n, self.t_init)?;
        if !(0.0..1.0).contains(&self.val_split) {
            return Err(CliError::usage(format!("val_split must be in [0, 1), got {}", self.val_split)));
        }
        match self.dataset {
            DatasetKind::Synthetic => {
                if self.classes < 2 {
                    return Err(CliError::usage("synthetic data needs at least 2 classes"));
                }
                if self.train_size < self.classes || self.test_size == 0 {
                    return Err(CliError::usage(format!(
                        "synthetic data needs train_size >= classes and test_size > 0 (got {} and {})",
                        self.train_size, self.test_size
                    )));
                }
                if !(self.margin.is_finite() && self.margin >= 0.0) {
                    return Err(CliError::usage(format!("margin must be finite and >= 0, got {}", self.margin)));
                }
            }
            DatasetKind::Cifar10 => match &self.data_dir {
                None => {
                    return Err(CliError::usage(format!(
                        "cifar10 needs data_dir (flag --data-dir or {DATA_DIR_ENV})"
                    )))
                }
                Some(d) if !d.is_dir() => {
                    return Err(CliError::usage(format!("data directory {} does not exist", d.display())))
                }
                Some(_) => {}
            },
        }
        Ok(())
    }
}
