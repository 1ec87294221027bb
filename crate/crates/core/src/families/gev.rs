//! Generalized extreme value distribution on the `(mu, tau = log sigma, xi)` scale.
//!
//! The log-density is written through `h = ln(1 + xi w) / xi` with
//! `w = (y - mu) / sigma`, which gives
//! `l = -tau - (1 + xi) h - exp(-h)`. Evaluating `h` as `w P(xi w)` with
//! `P(s) = ln(1+s)/s` keeps the expression and all its derivatives stable as
//! `xi -> 0`, where it reduces to the Gumbel log-density.

use super::scalar::Scalar;

/// Shapes with `|xi|` at or below this value use the Gumbel branch (`xi = 0`).
pub fn gumbel_threshold() -> f64 {
    f64::EPSILON.powf(0.3)
}

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[inline]
pub fn is_gumbel(xi: f64) -> bool {
    xi.abs() <= gumbel_threshold()
}

/// Log-density, continuous through `xi = 0`.
/// Returns `None` when `1 + xi (y - mu)/sigma <= 0`.
pub fn loglik<T: Scalar>(y: f64, mu: T, tau: T, xi: T) -> Option<T> {
    let w = (T::cst(y) - mu) * (-tau).exp();
    let s = xi * w;
    if !(1.0 + s.value() > 0.0) {
        return None;
    }
    let h = w * s.log1p_ratio();
    Some(-tau - xi.add_const(1.0) * h - (-h).exp())
}

/// Distribution function.
pub fn cdf(y: f64, mu: f64, tau: f64, xi: f64) -> f64 {
    let w = (y - mu) * (-tau).exp();
    if is_gumbel(xi) {
        return (-(-w).exp()).exp();
    }
    let s = xi * w;
    if 1.0 + s <= 0.0 {
        return if xi > 0.0 { 0.0 } else { 1.0 };
    }
    let h = s.ln_1p() / xi;
    (-(-h).exp()).exp()
}

/// Quantile function, `F^{-1}(p)`.
pub fn quantile(mu: f64, tau: f64, xi: f64, p: f64) -> f64 {
    let sigma = tau.exp();
    let e = -p.ln();
    mu + sigma * standard_quantile(e, xi)
}

/// `((-ln u)^{-xi} - 1)/xi` written in terms of `e = -ln u`.
fn standard_quantile(e: f64, xi: f64) -> f64 {
    let le = e.ln();
    if is_gumbel(xi) {
        -le
    } else {
        (-xi * le).exp_m1() / xi
    }
}

/// Inverse-CDF draw from a uniform variate in (0, 1).
pub fn sample_from_uniform(mu: f64, tau: f64, xi: f64, u: f64) -> f64 {
    quantile(mu, tau, xi, u)
}

/// Expectation; `+inf` when `xi >= 1`.
pub fn mean(mu: f64, tau: f64, xi: f64) -> f64 {
    let sigma = tau.exp();
    if is_gumbel(xi) {
        mu + EULER_GAMMA * sigma
    } else if xi >= 1.0 {
        f64::INFINITY
    } else {
        mu + sigma * (super::special::gamma(1.0 - xi) - 1.0) / xi
    }
}
