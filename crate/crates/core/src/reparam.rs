//! The stopband function `h_t` and the apparent-weight reparametrization.
//!
//! A weight `w` is used by the network as `ŵ = w · h_t(w)`, where
//!
//! ```text
//! h_t(x) = C1 · (exp(-1 / ((t·x)^n + 1)) - C2),   C1 = 1 / (1 - e⁻¹),  C2 = e⁻¹
//! ```
//!
//! `h_t` is even, C¹, bounded in `[0, 1]`, zero at the origin and tends to one
//! for large `|t·x|`. The temperature `t` sets the width of the suppressed band
//! around zero and the even crispness `n` sets how sharp the transition is.
//! Temperatures are stored in log space (`t = exp(τ)`) so gradient descent on
//! `τ` can never produce a non-positive temperature.

use crate::{Error, Real, Result};

/// `C2 = e⁻¹`.
pub fn c2() -> Real {
    (-1.0 as Real).exp()
}

/// `C1 = 1 / (1 - e⁻¹)`.
pub fn c1() -> Real {
    1.0 / (1.0 - c2())
}

/// Above this value of `(t·x)^n` the function is saturated at exactly one.
pub const SATURATION: Real = 1e15;

/// Even, positive exponent controlling the sharpness of the transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Crispness(u32);

impl Crispness {
    pub fn new(n: u32) -> Result<Self> {
        if n < 2 || n % 2 != 0 {
            return Err(Error::usage(format!(
                "crispness must be an even integer >= 2, got {n}"
            )));
        }
        Ok(Self(n))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl Default for Crispness {
    fn default() -> Self {
        Self(4)
    }
}

/// Per-layer learnable temperature stored as `τ = ln t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    log_t: Real,
}

impl Temperature {
    pub fn new(t: Real) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::usage(format!("temperature must be positive, got {t}")));
        }
        Ok(Self { log_t: t.ln() })
    }

    pub fn from_log(log_t: Real) -> Self {
        Self { log_t }
    }

    pub fn t(self) -> Real {
        self.log_t.exp()
    }

    pub fn log_t(self) -> Real {
        self.log_t
    }
}

/// Hyper-parameters of the reparametrization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReparamConfig {
    pub crispness: Crispness,
    pub t_init: Real,
}

impl ReparamConfig {
    pub fn new(n: u32, t_init: Real) -> Result<Self> {
        let crispness = Crispness::new(n)?;
        Temperature::new(t_init)?;
        Ok(Self { crispness, t_init })
    }
}

impl Default for ReparamConfig {
    fn default() -> Self {
        Self {
            crispness: Crispness(4),
            t_init: 100.0,
        }
    }
}

/// `(t·x)^n`, evaluated as `((t·x)²)^(n/2)` so that `x` and `-x` give the
/// same bits.
#[inline]
fn even_power(s: Real, n: u32) -> Real {
    (s * s).powi((n / 2) as i32)
}

/// The original form `exp(-1 / (t·x)^n)`.
///
/// In IEEE arithmetic the value at `x = 0` is `exp(-inf) = 0`, but the
/// derivative there is `0 · inf = NaN` (see [`h_unstable_grad`]), which is
/// what breaks backpropagation. Kept for comparison only.
pub fn h_unstable(x: Real, t: Real, n: u32) -> Real {
    (-(t * x).powi(-(n as i32))).exp()
}

/// `∂/∂x` of [`h_unstable`]: `n·t·(t·x)^(-n-1) · exp(-(t·x)^(-n))`. NaN at `x = 0`.
pub fn h_unstable_grad(x: Real, t: Real, n: u32) -> Real {
    let s = t * x;
    n as Real * t * s.powi(-(n as i32) - 1) * (-s.powi(-(n as i32))).exp()
}

/// The stabilized stopband function.
#[inline]
pub fn h(x: Real, t: Real, n: u32) -> Real {
    let p = even_power(t * x, n);
    if p > SATURATION {
        return 1.0;
    }
    // exp(-1/(p+1)) - e^-1 = e^-1 · expm1(p/(p+1)), without the cancellation
    // that flushes small p to zero.
    c1() * c2() * (p / (p + 1.0)).exp_m1()
}

/// Partial derivatives `(∂h/∂x, ∂h/∂t)`.
#[inline]
pub fn h_grad(x: Real, t: Real, n: u32) -> (Real, Real) {
    let s = t * x;
    let p = even_power(s, n);
    if p > SATURATION {
        return (0.0, 0.0);
    }
    let d = p + 1.0;
    // ∂h/∂p, with ∂p/∂x = n·t·s^(n-1) and ∂p/∂t = n·x·s^(n-1).
    let dh_dp = c1() * (-1.0 / d).exp() / (d * d);
    let common = dh_dp * n as Real * s.powi(n as i32 - 1);
    (common * t, common * x)
}

/// Value and derivatives at once: `(h, ∂h/∂x, ∂h/∂t)`.
#[inline]
pub fn h_with_grad(x: Real, t: Real, n: u32) -> (Real, Real, Real) {
    let s = t * x;
    let p = even_power(s, n);
    if p > SATURATION {
        return (1.0, 0.0, 0.0);
    }
    let d = p + 1.0;
    let e = (-1.0 / d).exp();
    let dh_dp = c1() * e / (d * d);
    let common = dh_dp * n as Real * s.powi(n as i32 - 1);
    (c1() * c2() * (p / d).exp_m1(), common * t, common * x)
}

/// `ŵ = w ⊙ h_t(w)`, elementwise.
pub fn apparent_weights(w: &[Real], temperature: Temperature, n: Crispness) -> Vec<Real> {
    let t = temperature.t();
    w.iter().map(|&x| x * h(x, t, n.get())).collect()
}

/// Finds a temperature `t` with `h_t(x) <= eps` for every `|x| <= a`.
///
/// `h_t` is increasing in `|x|` and in `t`, so the worst case is `x = a` and
/// the condition is monotone in `t`; bisection in log space finds the
/// largest such `t` up to a relative tolerance.
pub fn suppressing_temperature(a: Real, eps: Real, n: Crispness) -> Option<Real> {
    if !(a > 0.0) || !(eps > 0.0) {
        return None;
    }
    let ok = |log_t: Real| h(a, log_t.exp(), n.get()) <= eps;
    let (mut lo, mut hi) = (-60.0 as Real, 60.0 as Real);
    if !ok(lo) {
        return None;
    }
    if ok(hi) {
        return Some(hi.exp());
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Some(lo.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: Real, b: Real) -> Real {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn constants_are_consistent() {
        assert!((c1() * (1.0 - c2()) - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn zero_maps_to_zero() {
        for n in [2, 4, 8] {
            for t in [1e-3, 1.0, 100.0] {
                assert_eq!(h(0.0, t, n), 0.0);
                assert_eq!(h_grad(0.0, t, n), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn unit_input_at_unit_temperature() {
        // (e^{-1/2} - e^{-1}) / (1 - e^{-1}), evaluated independently.
        let expected = ((-0.5f64).exp() - (-1.0f64).exp()) / (1.0 - (-1.0f64).exp());
        assert!((h(1.0, 1.0, 4) as f64 - expected).abs() < 1e-15);
        assert!((expected - 0.377541).abs() < 1e-6);
    }

    #[test]
    fn unstable_variant() {
        assert_eq!(h_unstable(0.0, 1.0, 4), 0.0);
        assert!(h_unstable_grad(0.0, 1.0, 4).is_nan());
        assert!(h_unstable_grad(1e-3, 1.0, 4).is_finite());
        assert!((h_unstable(1.0, 1.0, 4) - (-1.0 as Real).exp()).abs() < 1e-15);
        assert!((h_unstable(1e6, 1.0, 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn saturates_for_large_inputs() {
        assert_eq!(h(1e5, 1.0, 4), 1.0);
        assert_eq!(h(-Real::MAX, 1e3, 8), 1.0);
        assert_eq!(h_grad(1e5, 1.0, 4), (0.0, 0.0));
        assert!(h(10.0, 1.0, 4) >= 0.9998);
    }

    #[test]
    fn derivative_matches_central_difference() {
        let step = 1e-6;
        for &(x, t, n) in &[(1.0, 1.0, 4), (0.3, 2.0, 2), (-0.7, 1.5, 8), (0.02, 40.0, 4)] {
            let (dx, dt) = h_grad(x, t, n);
            let fd_x = (h(x + step, t, n) - h(x - step, t, n)) / (2.0 * step);
            let fd_t = (h(x, t + step, n) - h(x, t - step, n)) / (2.0 * step);
            assert!(rel(dx, fd_x) < 1e-8, "dx {dx} vs {fd_x} at {x},{t},{n}");
            assert!(rel(dt, fd_t) < 1e-8, "dt {dt} vs {fd_t} at {x},{t},{n}");
        }
    }

    #[test]
    fn derivative_is_odd_in_x() {
        for x in [0.1, 0.5, 1.3, 2.0] {
            assert_eq!(h_grad(x, 1.0, 4).0, -h_grad(-x, 1.0, 4).0);
        }
    }

    #[test]
    fn crispness_must_be_even() {
        assert!(Crispness::new(3).is_err());
        assert!(Crispness::new(0).is_err());
        assert!(Crispness::new(6).is_ok());
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
    }

    #[test]
    fn large_weights_pass_through() {
        let t = Temperature::new(1.0).unwrap();
        let w = [10.0, -12.0, 50.0];
        for (a, b) in apparent_weights(&w, t, Crispness::default()).iter().zip(&w) {
            assert!(rel(*a, *b) <= 1e-3);
        }
    }

    #[test]
    fn bisection_finds_stopband() {
        let n = Crispness::default();
        let t = suppressing_temperature(1.0, 0.01, n).unwrap();
        assert!(h(1.0, t, 4) <= 0.01);
        assert!(h(1.0, t * 1.01, 4) > 0.01);
    }
}
