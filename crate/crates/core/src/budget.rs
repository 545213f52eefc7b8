//! Surrogate ℓ0 cost and the normalized budget loss.

use crate::autodiff::{Graph, Var};
use crate::reparam::{self, Crispness, Temperature};
use crate::{Error, Real, Result};

/// Default weight of the budget term in the mixed objective.
pub const DEFAULT_LAMBDA: Real = 5.0;

/// Target cost of a pruned network and the weight of the budget term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetSpec {
    initial_cost: Real,
    prune_rate: Real,
    lambda: Real,
}

impl BudgetSpec {
    /// `initial_cost` is the number of prunable parameters of the dense
    /// network; `prune_rate` is the fraction of them to remove.
    pub fn new(initial_cost: Real, prune_rate: Real, lambda: Real) -> Result<Self> {
        if !(initial_cost > 0.0) || !initial_cost.is_finite() {
            return Err(Error::usage(format!(
                "initial cost must be positive, got {initial_cost}"
            )));
        }
        if !(0.0..1.0).contains(&prune_rate) {
            return Err(Error::usage(format!(
                "prune rate must lie in [0, 1), got {prune_rate}"
            )));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::usage(format!("lambda must be non-negative, got {lambda}")));
        }
        Ok(Self {
            initial_cost,
            prune_rate,
            lambda,
        })
    }

    pub fn initial_cost(&self) -> Real {
        self.initial_cost
    }

    pub fn prune_rate(&self) -> Real {
        self.prune_rate
    }

    pub fn lambda(&self) -> Real {
        self.lambda
    }

    /// Cost the budget loss pulls towards: the kept fraction of the initial cost.
    pub fn target_cost(&self) -> Real {
        (1.0 - self.prune_rate) * self.initial_cost
    }

    /// Budget loss for a plain cost value.
    pub fn loss_value(&self, cost: Real) -> Real {
        let r = (cost - self.target_cost()) / self.initial_cost;
        r * r
    }
}

/// `Σ_layers Σ_elements h_t(w)` over the given `(weight, log-temperature)` pairs.
pub fn surrogate_cost(g: &mut Graph, layers: &[(Var, Var)], n: Crispness) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(w, log_t) in layers {
        let h = g.stopband(w, log_t, n.get())?;
        let s = g.sum(h);
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => Ok(g.constant(crate::Tensor::scalar(0.0))),
    }
}

/// Plain evaluation of the surrogate cost.
pub fn surrogate_cost_value<'a>(
    layers: impl IntoIterator<Item = (&'a [Real], Temperature)>,
    n: Crispness,
) -> Real {
    layers
        .into_iter()
        .map(|(w, temp)| {
            let t = temp.t();
            w.iter().map(|&x| reparam::h(x, t, n.get())).sum::<Real>()
        })
        .sum()
}

/// `((C - C_target) / C_initial)²`.
pub fn budget_loss(g: &mut Graph, cost: Var, spec: &BudgetSpec) -> Var {
    let scale = 1.0 / spec.initial_cost;
    let gap = g.affine(cost, scale, -spec.target_cost() * scale);
    g.square(gap)
}

/// `task + λ · budget`.
pub fn total_loss(g: &mut Graph, task: Var, budget: Var, lambda: Real) -> Result<Var> {
    let weighted = g.scale(budget, lambda);
    g.add(task, weighted)
}
