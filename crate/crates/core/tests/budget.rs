mod common;

use stopband_core::budget::{budget_loss, surrogate_cost, total_loss, BudgetSpec};
use stopband_core::{Crispness, Graph, Real, Tensor};

/// Weights whose surrogate cost equals the target exactly: a fraction of
/// saturated weights and the rest at zero.
#[test]
fn zero_loss_and_zero_gradient_at_the_fixed_point() {
    let n = Crispness::default();
    let mut data = vec![0.0; 1000];
    for v in data.iter_mut().take(500) {
        *v = 1e6;
    }
    // p = 0.5 keeps the target (500) exactly representable.
    let spec = BudgetSpec::new(1000.0, 0.5, 5.0).unwrap();
    let mut g = Graph::new();
    let w = g.param(Tensor::new(vec![1000], data).unwrap());
    let lt = g.param(Tensor::scalar(0.0));
    let c = surrogate_cost(&mut g, &[(w, lt)], n).unwrap();
    assert_eq!(g.value(c).item(), spec.target_cost());
    let b = budget_loss(&mut g, c, &spec);
    let l = g.scale(b, spec.lambda());
    assert_eq!(g.value(l).item(), 0.0);
    g.backward(l).unwrap();
    assert!(g.grad(w).unwrap().iter().all(|&v| v == 0.0));
    assert!(g.grad(lt).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn budget_gradient_in_cost_matches_formula_and_differences() {
    let spec = BudgetSpec::new(1000.0, 0.5, 5.0).unwrap();
    for &c in &[50.0, 370.5, 500.0, 1000.0] {
        let mut g = Graph::new();
        let cv = g.param(Tensor::scalar(c));
        let b = budget_loss(&mut g, cv, &spec);
        g.backward(b).unwrap();
        let analytic = g.grad(cv).unwrap()[0];
        let formula = 2.0 * (c - spec.target_cost()) / (1000.0 * 1000.0);
        let h = 1e-4;
        let fd = (spec.loss_value(c + h) - spec.loss_value(c - h)) / (2.0 * h);
        assert!(common::rel_err(analytic, formula, 1e-300) <= 1e-12, "c={c}");
        if formula != 0.0 {
            assert!(common::rel_err(analytic, fd, 1e-12) <= 1e-8, "c={c}");
        }
    }
}

#[test]
fn both_terms_reach_the_weights() {
    let mut r = common::rng(4);
    let w0 = common::random_tensor(&mut r, &[4, 3], -0.5, 0.5);
    let grads = |lambda: Real| {
        let mut g = Graph::new();
        let x = g.constant(common::random_tensor(&mut common::rng(5), &[2, 4], -1.0, 1.0));
        let w = g.param(w0.clone());
        let lt = g.param(Tensor::scalar(1.0));
        let wh = g.apparent_weights(w, lt, 4).unwrap();
        let logits = g.matmul(x, wh).unwrap();
        let task = g.softmax_cross_entropy(logits, &[0, 2]).unwrap();
        let c = surrogate_cost(&mut g, &[(w, lt)], Crispness::default()).unwrap();
        let spec = BudgetSpec::new(12.0, 0.5, lambda).unwrap();
        let b = budget_loss(&mut g, c, &spec);
        let l = total_loss(&mut g, task, b, lambda).unwrap();
        g.backward(l).unwrap();
        (g.grad(w).unwrap().to_vec(), g.grad(lt).unwrap()[0])
    };
    let (task_only, tau_task) = grads(0.0);
    let (mixed, tau_mixed) = grads(5.0);
    assert!(task_only.iter().any(|&v| v != 0.0));
    assert!(task_only.iter().zip(&mixed).any(|(a, b)| a != b));
    assert!(tau_task != 0.0 && tau_mixed != tau_task);
}

#[test]
fn budget_alone_converges_on_a_toy_layer() {
    let gap = common::toy_layer_budget_gap(200);
    assert!(gap <= 0.01, "gap {gap}");
}
