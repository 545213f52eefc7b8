mod common;

use proptest::prelude::*;
use stopband_core::reparam::{apparent_weights, h, h_grad, suppressing_temperature, SATURATION};
use stopband_core::{Crispness, Real, Temperature};

fn crispness() -> impl Strategy<Value = u32> {
    prop_oneof![Just(2u32), Just(4), Just(8)]
}

fn temperature() -> impl Strategy<Value = Real> {
    ((1e-3 as Real).ln()..(1e3 as Real).ln()).prop_map(Real::exp)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn bounded(x in -1e3..1e3 as Real, t in temperature(), n in crispness()) {
        let v = h(x, t, n);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v), "h = {v}");
    }

    #[test]
    fn even_bit_for_bit(x in -1e3..1e3 as Real, t in temperature(), n in crispness()) {
        prop_assert_eq!(h(x, t, n).to_bits(), h(-x, t, n).to_bits());
    }

    #[test]
    fn derivative_in_x_is_odd(x in -10.0..10.0 as Real, t in 0.1..10.0 as Real, n in crispness()) {
        let (a, _) = h_grad(x, t, n);
        let (b, _) = h_grad(-x, t, n);
        prop_assert_eq!(a, -b);
    }

    #[test]
    fn nondecreasing_in_magnitude_and_temperature(
        x in 0.0..1e3 as Real,
        grow in 1.0..3.0 as Real,
        t in temperature(),
        n in crispness(),
    ) {
        prop_assert!(h(x * grow, t, n) >= h(x, t, n));
        prop_assert!(h(x, t * grow, n) >= h(x, t, n));
    }

    #[test]
    fn apparent_weights_contract(w in prop::collection::vec(-50.0..50.0 as Real, 1..40), t in temperature(), n in crispness()) {
        let a = apparent_weights(&w, Temperature::new(t).unwrap(), Crispness::new(n).unwrap());
        for (&wi, &ai) in w.iter().zip(&a) {
            prop_assert!(ai.abs() <= wi.abs());
            prop_assert!(ai == 0.0 || ai.signum() == wi.signum());
        }
    }

    #[test]
    fn saturated_inputs_pass_through(x in 1.0..1e6 as Real, n in crispness()) {
        // Choose t so that (t·x)^n is beyond the saturation threshold.
        let t = 2.0 * SATURATION.powf(1.0 / n as Real) / x;
        prop_assert_eq!(h(x, t, n), 1.0);
        prop_assert_eq!(h_grad(x, t, n), (0.0, 0.0));
    }
}

#[test]
fn full_property_suite() {
    common::h_property_suite(10_000, 42).unwrap();
}

#[test]
fn scalar_derivatives_match_central_differences() {
    let worst = common::scalar_derivative_errors(2000, 9);
    for (name, e) in ["dh/dx", "dh/dt", "dŵ/dw", "dŵ/dτ"].iter().zip(worst) {
        assert!(e <= 1e-6, "{name}: {e:e}");
    }
    assert!(common::apparent_weight_graph_error(3) <= 1e-6);
}

#[test]
fn strictly_increasing_in_temperature_before_saturation() {
    let mut prev = 0.0;
    for i in 1..100 {
        let t = i as Real * 0.05;
        let v = h(0.7, t, 4);
        assert!(v > prev, "t={t}");
        prev = v;
    }
}

#[test]
fn suppression_is_tight() {
    let n = Crispness::new(4).unwrap();
    let t = suppressing_temperature(1.0, 0.01, n).unwrap();
    assert!(h(1.0, t, 4) <= 0.01);
    assert!(h(1.0, t * 1.001, 4) > 0.01);
}
