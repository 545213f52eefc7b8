#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stopband_core::budget::{budget_loss, surrogate_cost, BudgetSpec};
use stopband_core::data_io::{synthetic_split, Dataset, SyntheticSpec};
use stopband_core::models::{BuildOptions, ForwardMode, Model};
use stopband_core::trainer::{train, TrainConfig, TrainMode, TrainOutcome};
use stopband_core::{Crispness, Graph, Real, ReparamConfig, Result, Tensor, Var};

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: Real, numeric: Real, floor: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Builds a scalar loss from leaf variables.
pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn evaluate(inputs: &[Tensor], build: &Build<'_>) -> Real {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.value(out).item()
}

/// Largest relative error between backprop gradients and central finite
/// differences with step `h`, over every coordinate of every input.
pub fn gradcheck(inputs: &[Tensor], build: &Build<'_>, h: Real, floor: Real) -> Real {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");
    let analytic: Vec<Vec<Real>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("leaf gradient").to_vec())
        .collect();

    let mut worst: Real = 0.0;
    let mut probe = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let x = inputs[ti].data()[j];
            probe[ti].data_mut()[j] = x + h;
            let up = evaluate(&probe, build);
            probe[ti].data_mut()[j] = x - h;
            let down = evaluate(&probe, build);
            probe[ti].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(a, numeric, floor));
        }
    }
    worst
}

/// Settings shared by the desk-scale training runs.
pub struct Desk {
    pub train: Dataset,
    pub test: Dataset,
    pub config: TrainConfig,
    pub prune_rate: Real,
    pub lambda: Real,
}

pub const DESK_SHAPE: [usize; 3] = [3, 8, 8];

pub fn desk() -> Desk {
    let spec = SyntheticSpec {
        seed: 7,
        classes: 10,
        shape: DESK_SHAPE.to_vec(),
        margin: 1.0,
    };
    let (train, test) = synthetic_split(&spec, 2000, 1000).expect("synthetic data");
    Desk {
        train,
        test,
        config: TrainConfig {
            epochs: 20,
            lr_init: 0.03,
            batch_size: 64,
            seed: 11,
            ..TrainConfig::default()
        },
        prune_rate: 0.9,
        lambda: 5.0,
    }
}

impl Desk {
    pub fn reparam_model(&self) -> Model {
        Model::build(
            "conv4-small",
            10,
            &DESK_SHAPE,
            BuildOptions {
                seed: 3,
                reparam: Some(ReparamConfig::new(4, 100.0).unwrap()),
            },
        )
        .unwrap()
    }

    pub fn plain_model(&self) -> Model {
        Model::build(
            "conv4-small",
            10,
            &DESK_SHAPE,
            BuildOptions {
                seed: 3,
                reparam: None,
            },
        )
        .unwrap()
    }

    pub fn train_reparam(&self) -> TrainOutcome {
        let model = self.reparam_model();
        let budget = BudgetSpec::new(model.count_prunable() as Real, self.prune_rate, self.lambda).unwrap();
        let config = TrainConfig {
            mode: TrainMode::Reparam,
            ..self.config.clone()
        };
        train(model, &self.train, &self.test, &config, Some(&budget)).expect("reparam training")
    }

    pub fn train_plain(&self) -> TrainOutcome {
        let config = TrainConfig {
            mode: TrainMode::Plain,
            ..self.config.clone()
        };
        train(self.plain_model(), &self.train, &self.test, &config, None).expect("plain training")
    }
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output coordinate carries a
/// different weight in the checked loss.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = random_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let r = g.constant(r);
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

/// Values in `[lo, hi]` (both positive) with a random sign, kept away from the
/// kinks of relu/abs and the pole of reciprocal.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Build<'static>>,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

/// One smooth random instance of every differentiable graph operation.
pub fn op_cases() -> Vec<OpCase> {
    let mut r = rng(2024);
    let r = &mut r;
    vec![
        case("add (broadcast)", vec![random_tensor(r, &[2, 3], -1.0, 1.0), random_tensor(r, &[1, 3], -1.0, 1.0)], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }),
        case("sub (broadcast)", vec![random_tensor(r, &[2, 3], -1.0, 1.0), random_tensor(r, &[2, 1], -1.0, 1.0)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, 2)
        }),
        case("mul (broadcast)", vec![random_tensor(r, &[2, 3, 2], -1.0, 1.0), random_tensor(r, &[3, 1], -1.0, 1.0)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 3)
        }),
        case("affine", vec![random_tensor(r, &[5], -1.0, 1.0)], |g, v| {
            let y = g.affine(v[0], 1.5, -0.25);
            let y = g.square(y);
            weighted_sum(g, y, 4)
        }),
        case("scale", vec![random_tensor(r, &[5], -1.0, 1.0)], |g, v| {
            let y = g.scale(v[0], -2.5);
            weighted_sum(g, y, 5)
        }),
        case("relu", vec![away_from_zero(r, &[8], 0.05, 2.0)], |g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, 6)
        }),
        case("square", vec![random_tensor(r, &[6], -2.0, 2.0)], |g, v| {
            let y = g.square(v[0]);
            weighted_sum(g, y, 7)
        }),
        case("exp", vec![random_tensor(r, &[6], -2.0, 2.0)], |g, v| {
            let y = g.exp(v[0]);
            weighted_sum(g, y, 8)
        }),
        case("reciprocal", vec![away_from_zero(r, &[6], 0.5, 2.0)], |g, v| {
            let y = g.reciprocal(v[0]);
            weighted_sum(g, y, 9)
        }),
        case("abs", vec![away_from_zero(r, &[6], 0.05, 2.0)], |g, v| {
            let y = g.abs(v[0]);
            weighted_sum(g, y, 10)
        }),
        case("even_power n=2", vec![random_tensor(r, &[6], -1.5, 1.5)], |g, v| {
            let y = g.even_power(v[0], 2)?;
            weighted_sum(g, y, 11)
        }),
        case("even_power n=4", vec![random_tensor(r, &[6], -1.5, 1.5)], |g, v| {
            let y = g.even_power(v[0], 4)?;
            weighted_sum(g, y, 12)
        }),
        case("even_power n=8", vec![random_tensor(r, &[6], -1.2, 1.2)], |g, v| {
            let y = g.even_power(v[0], 8)?;
            weighted_sum(g, y, 13)
        }),
        case("sum", vec![random_tensor(r, &[2, 3], -1.0, 1.0)], |g, v| {
            let s = g.sum(v[0]);
            Ok(g.square(s))
        }),
        case("mean", vec![random_tensor(r, &[2, 3], -1.0, 1.0)], |g, v| {
            let s = g.mean(v[0]);
            Ok(g.square(s))
        }),
        case("reshape", vec![random_tensor(r, &[2, 3], -1.0, 1.0)], |g, v| {
            let y = g.reshape(v[0], vec![3, 2])?;
            weighted_sum(g, y, 14)
        }),
        case("flatten", vec![random_tensor(r, &[2, 2, 2, 2], -1.0, 1.0)], |g, v| {
            let y = g.flatten(v[0])?;
            weighted_sum(g, y, 15)
        }),
        case("global_avg_pool", vec![random_tensor(r, &[2, 3, 4, 4], -1.0, 1.0)], |g, v| {
            let y = g.global_avg_pool(v[0])?;
            weighted_sum(g, y, 16)
        }),
        case("matmul", vec![random_tensor(r, &[3, 4], -1.0, 1.0), random_tensor(r, &[4, 5], -1.0, 1.0)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 17)
        }),
        case("conv2d stride 1 pad 1", vec![random_tensor(r, &[2, 2, 5, 5], -1.0, 1.0), random_tensor(r, &[3, 2, 3, 3], -1.0, 1.0)], |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1)?;
            weighted_sum(g, y, 18)
        }),
        case("conv2d stride 2 pad 0", vec![random_tensor(r, &[1, 2, 6, 6], -1.0, 1.0), random_tensor(r, &[2, 2, 2, 2], -1.0, 1.0)], |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 0)?;
            weighted_sum(g, y, 19)
        }),
        case("maxpool2d", vec![random_tensor(r, &[2, 2, 4, 4], -1.0, 1.0)], |g, v| {
            let y = g.maxpool2d(v[0])?;
            weighted_sum(g, y, 20)
        }),
        case(
            "batchnorm2d",
            vec![random_tensor(r, &[3, 2, 3, 3], -1.0, 1.0), random_tensor(r, &[2], 0.5, 1.5), random_tensor(r, &[2], -0.5, 0.5)],
            |g, v| {
                let (y, _) = g.batchnorm2d(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, 21)
            },
        ),
        case("softmax_cross_entropy", vec![random_tensor(r, &[4, 5], -2.0, 2.0)], |g, v| {
            g.softmax_cross_entropy(v[0], &[0, 3, 4, 1])
        }),
        case("stopband", vec![away_from_zero(r, &[8], 0.05, 2.0), Tensor::scalar(0.3)], |g, v| {
            let y = g.stopband(v[0], v[1], 4)?;
            weighted_sum(g, y, 22)
        }),
        case("apparent_weights", vec![away_from_zero(r, &[8], 0.01, 1.0), Tensor::scalar(1.2)], |g, v| {
            let y = g.apparent_weights(v[0], v[1], 4)?;
            weighted_sum(g, y, 23)
        }),
    ]
}

/// Pointwise tolerance for single operations.
pub const OP_TOLERANCE: Real = 1e-6;
/// Floor of the relative-error denominator: gradients far below it are
/// compared in absolute terms.
pub const GRAD_FLOOR: Real = 1e-3;
pub const FD_STEP: Real = 1e-6;

/// Scalar derivative oracles: `dh/dx`, `dh/dt`, `∂ŵ/∂w`, `∂ŵ/∂τ` against
/// central differences at random moderate points. Returns the worst relative
/// error of each, in that order.
pub fn scalar_derivative_errors(samples: usize, seed: u64) -> [Real; 4] {
    use stopband_core::reparam::{h, h_grad};
    let mut r = rng(seed);
    let mut worst = [0.0 as Real; 4];
    let step = 1e-6;
    for _ in 0..samples {
        let n = [2u32, 4, 8][r.gen_range(0..3)];
        let t: Real = (r.gen_range(-2.0..2.0) as Real).exp();
        let x: Real = r.gen_range(0.05..3.0) / t * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (dx, dt) = h_grad(x, t, n);
        let hx = step * x.abs().max(1e-3);
        let ht = step * t;
        let fd_x = (h(x + hx, t, n) - h(x - hx, t, n)) / (2.0 * hx);
        let fd_t = (h(x, t + ht, n) - h(x, t - ht, n)) / (2.0 * ht);
        worst[0] = worst[0].max(rel_err(dx, fd_x, GRAD_FLOOR));
        worst[1] = worst[1].max(rel_err(dt, fd_t, GRAD_FLOOR));

        // ŵ(w, τ) = w · h(w, e^τ)
        let tau = t.ln();
        let what = |w: Real, tau: Real| w * h(w, tau.exp(), n);
        let dw = h(x, t, n) + x * dx;
        let dtau = x * dt * t;
        let hw = hx;
        let htau = step;
        let fd_w = (what(x + hw, tau) - what(x - hw, tau)) / (2.0 * hw);
        let fd_tau = (what(x, tau + htau) - what(x, tau - htau)) / (2.0 * htau);
        worst[2] = worst[2].max(rel_err(dw, fd_w, GRAD_FLOOR));
        worst[3] = worst[3].max(rel_err(dtau, fd_tau, GRAD_FLOOR));
    }
    worst
}

/// Graph-level `∂ŵ/∂w` and `∂ŵ/∂τ` of `sum(ŵ)` against central differences.
pub fn apparent_weight_graph_error(seed: u64) -> Real {
    let mut r = rng(seed);
    let w = away_from_zero(&mut r, &[16], 0.005, 0.5);
    gradcheck(
        &[w, Tensor::scalar(2.0)],
        &|g: &mut Graph, v: &[Var]| {
            let y = g.apparent_weights(v[0], v[1], 4)?;
            Ok(g.sum(y))
        },
        FD_STEP,
        GRAD_FLOOR,
    )
}

/// The h_t property suite over `samples` random `(x, t, n)`; returns the
/// first violated property.
pub fn h_property_suite(samples: usize, seed: u64) -> std::result::Result<(), String> {
    use stopband_core::reparam::{apparent_weights, h, suppressing_temperature};
    use stopband_core::{Crispness, Temperature};
    let mut r = rng(seed);
    for _ in 0..samples {
        let x: Real = r.gen_range(-1e3..1e3);
        let t: Real = (r.gen_range((1e-3 as Real).ln()..(1e3 as Real).ln())).exp();
        let n = [2u32, 4, 8][r.gen_range(0..3)];
        let v = h(x, t, n);
        if !(-1e-12..=1.0 + 1e-12).contains(&v) {
            return Err(format!("bounds: h({x}, {t}, {n}) = {v}"));
        }
        if v.to_bits() != h(-x, t, n).to_bits() {
            return Err(format!("symmetry at x={x}, t={t}, n={n}"));
        }
        let y = x.abs() * r.gen_range(1.01..2.0);
        if h(y, t, n) < v {
            return Err(format!("monotone in |x|: h({y}) < h({x}) at t={t}, n={n}"));
        }
        let t2 = t * r.gen_range(1.01..2.0);
        if h(x, t2, n) < v {
            return Err(format!("monotone in t at x={x}, t={t}, n={n}"));
        }
        let temp = Temperature::new(t).unwrap();
        let a = apparent_weights(&[x], temp, Crispness::new(n).unwrap())[0];
        if a.abs() > x.abs() || (a != 0.0 && a.signum() != x.signum()) {
            return Err(format!("contraction at w={x}: ŵ={a}"));
        }
        let s = (t * x).abs();
        if n == 4 && s >= 10.0 && v < 0.999 {
            return Err(format!("pass-band: h={v} at |t·x|={s}"));
        }
    }
    for &(t, n) in &[(1e-3, 2u32), (1.0, 4), (1e3, 8)] {
        if h(0.0, t, n) != 0.0 {
            return Err(format!("h(0) != 0 at t={t}, n={n}"));
        }
    }
    // Strict monotonicity on a pre-saturation grid.
    for &n in &[2u32, 4, 8] {
        let mut prev = 0.0;
        for i in 1..200 {
            let x = i as Real * 0.01;
            let v = h(x, 1.0, n);
            if v <= prev {
                return Err(format!("not strictly increasing at x={x}, n={n}"));
            }
            prev = v;
        }
    }
    // Smooth through zero: one-sided slopes vanish.
    for &k in &[1e-2, 1e-4, 1e-6] {
        let slope = (h(k, 1.0, 4) - h(0.0, 1.0, 4)) / k;
        if slope.abs() > 10.0 * k {
            return Err(format!("slope {slope} at step {k}"));
        }
    }
    // Stopband: a temperature exists that suppresses |x| <= 1 below 0.01.
    let n = Crispness::new(4).unwrap();
    let t_star = suppressing_temperature(1.0, 0.01, n).ok_or("no suppressing temperature found")?;
    for i in 0..=10_000 {
        let x = i as Real / 10_000.0;
        if h(x, t_star, 4) > 0.01 {
            return Err(format!("h_{{t*}}({x}) = {} > 0.01", h(x, t_star, 4)));
        }
    }
    Ok(())
}

/// Gradient descent on the budget loss alone, over the weights and the
/// log-temperature of a 1,000-weight layer.
pub fn toy_layer_budget_gap(steps: usize) -> Real {
    let mut r = rng(17);
    let mut w = random_tensor(&mut r, &[1000], -0.1, 0.1);
    let mut tau: Real = (100.0 as Real).ln();
    let spec = BudgetSpec::new(1000.0, 0.9, 5.0).unwrap();
    let lr = 1.0;
    for _ in 0..steps {
        let mut g = Graph::new();
        let wv = g.param(w.clone());
        let lt = g.param(Tensor::scalar(tau));
        let c = surrogate_cost(&mut g, &[(wv, lt)], Crispness::default()).unwrap();
        let b = budget_loss(&mut g, c, &spec);
        let l = g.scale(b, spec.lambda());
        g.backward(l).unwrap();
        for (v, d) in w.data_mut().iter_mut().zip(g.grad(wv).unwrap()) {
            *v -= lr * d;
        }
        tau -= lr * g.grad(lt).unwrap()[0];
    }
    let mut g = Graph::new();
    let wv = g.constant(w);
    let lt = g.constant(Tensor::scalar(tau));
    let c = surrogate_cost(&mut g, &[(wv, lt)], Crispness::default()).unwrap();
    (g.value(c).item() - spec.target_cost()).abs() / spec.initial_cost()
}

/// A reparametrized mlp-toy-sized model with a random weight spread, used
/// for pruning properties without training.
pub fn spread_model(seed: u64) -> Model {
    use stopband_core::models::{LayerSpec, ModelSpec};
    let spec = ModelSpec::new(
        "spread",
        vec![
            LayerSpec::conv(2, 4, 3, 1, true),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::linear(4 * 4 * 4, 6),
        ],
        6,
        vec![2, 4, 4],
    )
    .unwrap();
    let mut m = Model::from_spec(
        spec,
        BuildOptions {
            seed,
            reparam: Some(ReparamConfig::new(4, 3.0).unwrap()),
        },
    )
    .unwrap();
    // Spread the log-temperatures so layers rank differently.
    let lts: Vec<usize> = m.prunable_layers().iter().filter_map(|l| l.log_t).collect();
    for (k, i) in lts.into_iter().enumerate() {
        m.params_mut()[i].value = Tensor::scalar(0.5 + k as Real);
    }
    m
}

/// Sets of zeroed positions, layer by layer.
pub fn zero_set(m: &Model) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (li, l) in m.prunable_layers().iter().enumerate() {
        for (j, &v) in m.params()[l.weight].value.data().iter().enumerate() {
            if v == 0.0 {
                out.push((li, j));
            }
        }
    }
    out
}

/// Task plus budget loss of conv4-small on one batch, with every parameter
/// as a graph leaf.
pub fn network_loss(model: &Model, images: &Tensor, labels: &[usize], g: &mut Graph, leaves: &[Var]) -> Var {
    let x = g.constant(images.clone());
    let fwd = model.forward_with(g, x, ForwardMode::Train, leaves).unwrap();
    let task = g.softmax_cross_entropy(fwd.logits, labels).unwrap();
    let cost = surrogate_cost(g, &fwd.reparam_pairs(model), Crispness::default()).unwrap();
    let spec = BudgetSpec::new(model.count_prunable() as Real, 0.9, 5.0).unwrap();
    let b = budget_loss(g, cost, &spec);
    let weighted = g.scale(b, 5.0);
    g.add(task, weighted).unwrap()
}

/// Worst relative error of backprop against central differences for the
/// task-plus-budget loss of conv4-small on one batch, probing a few
/// coordinates of every parameter tensor.
pub fn conv4_small_gradient_error() -> Real {
    let model = Model::build(
        "conv4-small",
        10,
        &[3, 8, 8],
        BuildOptions {
            seed: 4,
            reparam: Some(ReparamConfig::new(4, 20.0).unwrap()),
        },
    )
    .unwrap();
    let mut r = rng(12);
    let images = random_tensor(&mut r, &[4, 3, 8, 8], -1.0, 1.0);
    let labels = [1, 7, 3, 0];
    let values: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();

    let mut g = Graph::new();
    let leaves: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
    let loss = network_loss(&model, &images, &labels, &mut g, &leaves);
    g.backward(loss).unwrap();

    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let leaves: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let l = network_loss(&model, &images, &labels, &mut g, &leaves);
        g.value(l).item()
    };

    // Probe a handful of coordinates of every parameter tensor, including
    // each layer's log-temperature.
    let h = 1e-6;
    let mut worst: Real = 0.0;
    let mut probe = values.clone();
    for (pi, v) in leaves.iter().enumerate() {
        let Some(grad) = g.grad(*v) else { continue };
        let grad = grad.to_vec();
        let len = grad.len();
        for j in [0, len / 3, len / 2, len - 1] {
            let x = values[pi].data()[j];
            probe[pi].data_mut()[j] = x + h;
            let up = eval(&probe);
            probe[pi].data_mut()[j] = x - h;
            let down = eval(&probe);
            probe[pi].data_mut()[j] = x;
            worst = worst.max(rel_err(grad[j], (up - down) / (2.0 * h), GRAD_FLOOR));
        }
    }
    worst
}
