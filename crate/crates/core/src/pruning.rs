//! Global magnitude pruning and sparsity measurement.
//!
//! Both pruning paths rank every prunable weight of the network together by
//! magnitude and zero the `⌊p · C_initial⌋` smallest. For a reparametrized
//! network the magnitudes ranked are those of the apparent weights
//! `w · h_t(w)`; the raw weight is what gets zeroed, so `ŵ` becomes zero too.
//! Ties are broken by flat position (layer order, then element order), which
//! makes the result deterministic.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::data_io::Dataset;
use crate::models::Model;
use crate::trainer::evaluate;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneMethod {
    /// Rank by apparent weights of a reparametrized network, no fine-tuning.
    Effective,
    /// Rank by raw weights of a plain network.
    Magnitude,
}

impl fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMethod::Effective => "effective",
            PruneMethod::Magnitude => "magnitude",
        })
    }
}

impl FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "effective" => Ok(PruneMethod::Effective),
            "magnitude" => Ok(PruneMethod::Magnitude),
            _ => Err(Error::usage(format!(
                "unknown pruning method '{s}' (expected effective or magnitude)"
            ))),
        }
    }
}

fn check_rate(p: Real) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::usage(format!("prune rate must lie in [0, 1), got {p}")))
    }
}

/// Flat positions of the `count` smallest magnitudes, ties by position.
fn smallest(magnitudes: &[Real], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..magnitudes.len()).collect();
    order.sort_by(|&a, &b| magnitudes[a].total_cmp(&magnitudes[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Zeroes the given flat positions and returns the per-layer keep masks.
fn zero_positions(model: &mut Model, positions: &[usize]) -> Vec<Vec<bool>> {
    let layers = model.prunable_layers().to_vec();
    let mut masks: Vec<Vec<bool>> = layers
        .iter()
        .map(|l| vec![true; model.params()[l.weight].value.len()])
        .collect();
    let mut offsets = Vec::with_capacity(layers.len());
    let mut acc = 0;
    for m in &masks {
        offsets.push(acc);
        acc += m.len();
    }
    for &pos in positions {
        let li = offsets.partition_point(|&o| o <= pos) - 1;
        masks[li][pos - offsets[li]] = false;
    }
    for (layer, mask) in layers.iter().zip(&masks) {
        let w = model.params_mut()[layer.weight].value.data_mut();
        for (v, &keep) in w.iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    masks
}

fn prune_count(model: &Model, p: Real) -> usize {
    (p * model.count_prunable() as Real).floor() as usize
}

/// Zeroes the raw weights whose apparent weights are globally smallest.
/// Returns the number of weights zeroed.
pub fn effective_prune(model: &mut Model, p: Real) -> Result<usize> {
    check_rate(p)?;
    if !model.is_reparametrized() {
        return Err(Error::usage("effective pruning needs a reparametrized model"));
    }
    let magnitudes: Vec<Real> = model
        .prunable_layers()
        .iter()
        .flat_map(|l| model.apparent_weights(l))
        .map(Real::abs)
        .collect();
    let k = prune_count(model, p);
    let positions = smallest(&magnitudes, k);
    zero_positions(model, &positions);
    Ok(k)
}

/// Zeroes the globally smallest raw weights of a plain model and attaches
/// keep masks so that fine-tuning leaves them at zero.
pub fn magnitude_prune(model: &mut Model, p: Real) -> Result<usize> {
    check_rate(p)?;
    if model.is_reparametrized() {
        return Err(Error::usage("magnitude pruning needs a plain model"));
    }
    let magnitudes: Vec<Real> = model
        .prunable_layers()
        .iter()
        .flat_map(|l| model.params()[l.weight].value.data().iter().map(|v| v.abs()))
        .collect();
    let k = prune_count(model, p);
    let positions = smallest(&magnitudes, k);
    let masks = zero_positions(model, &positions);
    let layers = model.prunable_layers().to_vec();
    for (layer, mask) in layers.iter().zip(masks) {
        model.params_mut()[layer.weight].mask = Some(mask);
    }
    Ok(k)
}

/// Re-zeroes masked entries, e.g. after an external parameter update.
pub fn apply_masks(model: &mut Model) {
    for p in model.params_mut() {
        if let Some(mask) = &p.mask {
            for (v, &keep) in p.value.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Sparsity of one prunable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFraction {
    pub name: String,
    pub nonzero_fraction: Real,
    /// `Σ h_t(w) / count`, reparametrized models only.
    pub surrogate_fraction: Option<Real>,
}

/// Measurements of a pruned network.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub target_rate: Real,
    pub method: Option<PruneMethod>,
    pub initial_cost: usize,
    pub surrogate_cost_fraction: Option<Real>,
    pub exact_nonzero_fraction: Real,
    pub layers: Vec<LayerFraction>,
    /// Test accuracy in percent.
    pub accuracy: Real,
    pub accuracy_before_prune: Option<Real>,
}

impl PruneReport {
    /// Measures `model` as it stands; accuracy is taken on `test`.
    pub fn measure(model: &Model, test: &Dataset, target_rate: Real) -> Result<Self> {
        if test.is_empty() {
            return Err(Error::usage("cannot measure accuracy on an empty test set"));
        }
        let mut layers = Vec::new();
        let mut nonzero = 0usize;
        for l in model.prunable_layers() {
            let w = model.params()[l.weight].value.data();
            let nz = w.iter().filter(|&&v| v != 0.0).count();
            nonzero += nz;
            let surrogate = match (model.temperature(l), model.crispness()) {
                (Some(t), Some(n)) => Some(
                    crate::budget::surrogate_cost_value([(w, t)], n) / w.len() as Real,
                ),
                _ => None,
            };
            layers.push(LayerFraction {
                name: l.name.clone(),
                nonzero_fraction: nz as Real / w.len() as Real,
                surrogate_fraction: surrogate,
            });
        }
        let initial_cost = model.count_prunable();
        Ok(Self {
            target_rate,
            method: None,
            initial_cost,
            surrogate_cost_fraction: model.surrogate_cost().map(|c| c / initial_cost as Real),
            exact_nonzero_fraction: nonzero as Real / initial_cost as Real,
            layers,
            accuracy: evaluate(model, test)?,
            accuracy_before_prune: None,
        })
    }

    /// `key=value` lines; per-layer entries are keyed `layer.<name>.*`.
    pub fn to_kv(&self) -> String {
        let mut out = BTreeMap::new();
        out.insert("target_rate".to_string(), self.target_rate.to_string());
        if let Some(m) = self.method {
            out.insert("method".into(), m.to_string());
        }
        out.insert("initial_cost".into(), self.initial_cost.to_string());
        if let Some(f) = self.surrogate_cost_fraction {
            out.insert("surrogate_cost_fraction".into(), f.to_string());
        }
        out.insert("exact_nonzero_fraction".into(), self.exact_nonzero_fraction.to_string());
        out.insert("accuracy".into(), self.accuracy.to_string());
        if let Some(a) = self.accuracy_before_prune {
            out.insert("accuracy_before_prune".into(), a.to_string());
        }
        let mut s: String = out.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        for (i, l) in self.layers.iter().enumerate() {
            s.push_str(&format!("layer.{i}.name={}\n", l.name));
            s.push_str(&format!("layer.{i}.nonzero_fraction={}\n", l.nonzero_fraction));
            if let Some(f) = l.surrogate_fraction {
                s.push_str(&format!("layer.{i}.surrogate_fraction={f}\n"));
            }
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("report line without '=': {line}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            map.get(k)
                .ok_or_else(|| Error::format(format!("report is missing '{k}'")))
        };
        let num = |k: &str| -> Result<Real> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("report field '{k}' is not a number")))
        };
        let opt = |k: &str| -> Result<Option<Real>> {
            if map.contains_key(k) {
                num(k).map(Some)
            } else {
                Ok(None)
            }
        };
        let mut layers = Vec::new();
        for i in 0.. {
            let prefix = format!("layer.{i}");
            let Some(name) = map.get(&format!("{prefix}.name")) else {
                break;
            };
            layers.push(LayerFraction {
                name: name.clone(),
                nonzero_fraction: num(&format!("{prefix}.nonzero_fraction"))?,
                surrogate_fraction: opt(&format!("{prefix}.surrogate_fraction"))?,
            });
        }
        Ok(Self {
            target_rate: num("target_rate")?,
            method: map.get("method").map(|m| m.parse()).transpose()?,
            initial_cost: get("initial_cost")?
                .parse()
                .map_err(|_| Error::format("report field 'initial_cost' is not an integer"))?,
            surrogate_cost_fraction: opt("surrogate_cost_fraction")?,
            exact_nonzero_fraction: num("exact_nonzero_fraction")?,
            layers,
            accuracy: num("accuracy")?,
            accuracy_before_prune: opt("accuracy_before_prune")?,
        })
    }
}
