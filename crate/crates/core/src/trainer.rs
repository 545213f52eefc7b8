//! SGD training loop with reduce-on-plateau and early stopping.
//!
//! One loop serves three purposes: training the reparametrized network
//! against the mixed objective `task + λ · budget`, training the plain
//! network for the magnitude-pruning baseline, and fine-tuning a
//! magnitude-pruned network with its mask held fixed.
//!
//! Accuracies are percentages throughout.

use std::fmt;
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::budget::{self, BudgetSpec};
use crate::data_io::Dataset;
use crate::models::{ForwardMode, Model, ParamRole};
use crate::{Error, Real, Result};

/// A reparametrized epoch counts as having reached its budget when the
/// surrogate remaining fraction is within this distance of `1 - p`.
pub const BUDGET_TOLERANCE: Real = 0.02;

const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Surrogate network, mixed task and budget objective.
    Reparam,
    /// Primary network, task loss only.
    Plain,
    /// Primary network with pruning masks enforced.
    Finetune,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Reparam => "reparam",
            TrainMode::Plain => "plain",
            TrainMode::Finetune => "finetune",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reparam" => Ok(TrainMode::Reparam),
            "plain" => Ok(TrainMode::Plain),
            "finetune" => Ok(TrainMode::Finetune),
            _ => Err(Error::usage(format!(
                "unknown training mode '{s}' (expected reparam, plain or finetune)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_init: Real,
    pub plateau_factor: Real,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// Applied to prunable weights only.
    pub weight_decay: Real,
    pub batch_size: usize,
    pub momentum: Real,
    pub seed: u64,
    pub mode: TrainMode,
    /// Random crop and horizontal flip of training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr_init: 0.1,
            plateau_factor: 0.3,
            plateau_patience: 10,
            early_stop_patience: 60,
            weight_decay: 5e-5,
            batch_size: 128,
            momentum: 0.9,
            seed: 0,
            mode: TrainMode::Reparam,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Usage(msg));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive".into());
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return bad(format!("initial learning rate must be positive, got {}", self.lr_init));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub task_loss: Real,
    pub budget_loss: Real,
    pub test_accuracy: Real,
    /// Learning rate used during this epoch.
    pub lr: Real,
    pub surrogate_fraction: Option<Real>,
    pub temperatures: Vec<Real>,
}

impl EpochRecord {
    pub const HEADER: &'static str =
        "# epoch\ttask_loss\tbudget_loss\ttest_accuracy\tlr\tsurrogate_fraction\ttemperatures";

    pub fn to_line(&self) -> String {
        let temps = if self.temperatures.is_empty() {
            "-".to_string()
        } else {
            self.temperatures
                .iter()
                .map(Real::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.task_loss,
            self.budget_loss,
            self.test_accuracy,
            self.lr,
            self.surrogate_fraction
                .map_or_else(|| "-".to_string(), |f| f.to_string()),
            temps
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        let [epoch, task, budget, acc, lr, frac, temps] = fields[..] else {
            return Err(Error::format(format!("history line has {} fields: {line}", fields.len())));
        };
        let num = |s: &str| -> Result<Real> {
            s.parse()
                .map_err(|_| Error::format(format!("bad number '{s}' in history")))
        };
        Ok(Self {
            epoch: epoch
                .parse()
                .map_err(|_| Error::format(format!("bad epoch '{epoch}'")))?,
            task_loss: num(task)?,
            budget_loss: num(budget)?,
            test_accuracy: num(acc)?,
            lr: num(lr)?,
            surrogate_fraction: if frac == "-" { None } else { Some(num(frac)?) },
            temperatures: if temps == "-" {
                Vec::new()
            } else {
                temps.split(',').map(num).collect::<Result<_>>()?
            },
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_text(&self) -> String {
        let mut s = String::from(EpochRecord::HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(EpochRecord::parse_line)
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without a strict improvement of the best accuracy.
#[derive(Clone, Debug)]
pub struct ReduceOnPlateau {
    factor: Real,
    patience: usize,
    lr: Real,
    best: Option<Real>,
    stale: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: Real, factor: Real, patience: usize) -> Self {
        Self {
            factor,
            patience,
            lr,
            best: None,
            stale: 0,
        }
    }

    pub fn lr(&self) -> Real {
        self.lr
    }

    /// Records an epoch's accuracy and returns the learning rate for the next one.
    pub fn step(&mut self, accuracy: Real) -> Real {
        if self.best.map_or(true, |b| accuracy > b) {
            self.best = Some(accuracy);
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr *= self.factor;
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Signals a stop once `patience` epochs pass without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<Real>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch's accuracy; `true` means stop.
    pub fn step(&mut self, accuracy: Real) -> bool {
        if self.best.map_or(true, |b| accuracy > b) {
            self.best = Some(accuracy);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub best: Model,
    pub best_epoch: usize,
    pub history: TrainHistory,
}

/// Test accuracy in percent.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Real> {
    if data.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty dataset"));
    }
    let k = model.spec().num_classes;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, labels) = data.batch(chunk)?;
        let logits = model.logits(&images)?;
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as Real / data.len() as Real)
}

struct Sgd {
    velocity: Vec<Option<Vec<Real>>>,
}

impl Sgd {
    /// `v ← μ·v + g (+ λ_wd·w for weights)`, `w ← w - lr·v`.
    fn step(&mut self, model: &mut Model, grads: &[Option<Vec<Real>>], lr: Real, cfg: &TrainConfig) {
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut model.params_mut()[i];
            let decay = if p.role == ParamRole::Weight { cfg.weight_decay } else { 0.0 };
            let v = self.velocity[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let w = p.value.data_mut();
            for ((vj, wj), &gj) in v.iter_mut().zip(w.iter_mut()).zip(g) {
                *vj = cfg.momentum * *vj + gj + decay * *wj;
                *wj -= lr * *vj;
            }
            if let Some(mask) = &p.mask {
                for (wj, &keep) in p.value.data_mut().iter_mut().zip(mask) {
                    if !keep {
                        *wj = 0.0;
                    }
                }
            }
        }
    }
}

/// [`train_with`] without an epoch callback.
pub fn train(
    model: Model,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    budget: Option<&BudgetSpec>,
) -> Result<TrainOutcome> {
    train_with(model, train_set, test_set, config, budget, |_| {})
}

/// Trains `model` and returns the parameters of the selected epoch.
///
/// The learning-rate schedule and early stopping follow test accuracy. In
/// reparam mode the returned epoch is the most accurate one whose surrogate
/// fraction is within [`BUDGET_TOLERANCE`] of the target (falling back to the
/// most accurate epoch overall if none is); otherwise it is simply the most
/// accurate epoch.
pub fn train_with(
    mut model: Model,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    budget: Option<&BudgetSpec>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    match (config.mode, budget, model.is_reparametrized()) {
        (TrainMode::Reparam, Some(_), true) => {}
        (TrainMode::Reparam, None, _) => {
            return Err(Error::usage("reparam training needs a budget specification"))
        }
        (TrainMode::Reparam, _, false) => {
            return Err(Error::usage("reparam training needs a reparametrized model"))
        }
        (_, Some(_), _) => {
            return Err(Error::usage(format!(
                "{} training takes no budget specification",
                config.mode
            )))
        }
        (_, None, true) => {
            return Err(Error::usage(format!(
                "{} training needs a plain model",
                config.mode
            )))
        }
        (_, None, false) => {}
    }
    if train_set.is_empty() {
        return Err(Error::usage("empty training set"));
    }
    if train_set.sample_shape() != model.spec().input_shape.as_slice() {
        return Err(Error::dim(format!(
            "dataset samples {:?} do not match model input {:?}",
            train_set.sample_shape(),
            model.spec().input_shape
        )));
    }

    let initial_cost = model.count_prunable() as Real;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(config.seed);
    augment_rng.set_stream(1);
    let mut sgd = Sgd {
        velocity: vec![None; model.params().len()],
    };
    let mut plateau = ReduceOnPlateau::new(config.lr_init, config.plateau_factor, config.plateau_patience);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut history = TrainHistory::default();
    let mut best: Option<(Model, usize, Real, bool)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let lr = plateau.lr();
        order.shuffle(&mut shuffle_rng);
        let (mut task_sum, mut budget_sum, mut seen) = (0.0, 0.0, 0usize);

        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let (mut images, labels) = train_set.batch(chunk)?;
            if config.augment {
                images = Dataset::augment(&images, &mut augment_rng);
            }
            let mut g = Graph::new();
            let x = g.constant(images);
            let fwd = model.forward(&mut g, x, ForwardMode::Train)?;
            let task = g.softmax_cross_entropy(fwd.logits, &labels)?;
            let (loss, budget_value) = match budget {
                Some(spec) => {
                    let n = model.crispness().expect("checked above");
                    let cost = budget::surrogate_cost(&mut g, &fwd.reparam_pairs(&model), n)?;
                    let bl = budget::budget_loss(&mut g, cost, spec);
                    let bv = g.value(bl).item();
                    (budget::total_loss(&mut g, task, bl, spec.lambda())?, bv)
                }
                None => (task, 0.0),
            };
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("loss is {loss_value}"),
                });
            }
            g.backward(loss).map_err(|e| Error::Divergence {
                epoch,
                step,
                detail: e.to_string(),
            })?;
            let grads: Vec<Option<Vec<Real>>> = fwd
                .params
                .iter()
                .map(|v| v.and_then(|v| g.grad(v).map(<[Real]>::to_vec)))
                .collect();
            sgd.step(&mut model, &grads, lr, config);
            model.apply_batch_stats(&fwd.batch_stats);

            task_sum += g.value(task).item() * chunk.len() as Real;
            budget_sum += budget_value * chunk.len() as Real;
            seen += chunk.len();
        }

        let accuracy = evaluate(&model, test_set)?;
        let surrogate_fraction = model.surrogate_cost().map(|c| c / initial_cost);
        let record = EpochRecord {
            epoch,
            task_loss: task_sum / seen as Real,
            budget_loss: budget_sum / seen as Real,
            test_accuracy: accuracy,
            lr,
            surrogate_fraction,
            temperatures: model.temperatures().iter().map(|t| t.t()).collect(),
        };
        info!(
            "epoch {epoch}: task {:.4} budget {:.5} acc {:.2}% lr {:.2e} remaining {}",
            record.task_loss,
            record.budget_loss,
            accuracy,
            lr,
            surrogate_fraction.map_or_else(|| "-".into(), |f| format!("{f:.4}"))
        );
        on_epoch(&record);
        history.records.push(record);

        let reached = match (budget, surrogate_fraction) {
            (Some(spec), Some(f)) => (f - (1.0 - spec.prune_rate())).abs() <= BUDGET_TOLERANCE,
            _ => true,
        };
        let better = match &best {
            None => true,
            Some((_, _, best_acc, best_reached)) => match (reached, *best_reached) {
                (true, false) => true,
                (false, true) => false,
                _ => accuracy > *best_acc,
            },
        };
        if better {
            best = Some((model.clone(), epoch, accuracy, reached));
        }

        plateau.step(accuracy);
        if stopper.step(accuracy) {
            info!("early stop after epoch {epoch}");
            break;
        }
    }

    let (best, best_epoch, _, _) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}
