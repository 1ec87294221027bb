//! Scalar abstraction shared by plain `f64` evaluation and jet evaluation, so
//! each log-likelihood is written once.

use std::ops::{Add, Mul, Neg, Sub};

use super::jet::Jet;
use super::special;

pub trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> {
    fn value(&self) -> f64;
    fn cst(v: f64) -> Self;
    fn scale(&self, k: f64) -> Self;
    fn add_const(&self, k: f64) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn ln_gamma(&self) -> Self;
    /// `ln(1 + e^x)`
    fn softplus(&self) -> Self;
    /// `ln(1 + s) / s`, continuous through `s = 0`.
    fn log1p_ratio(&self) -> Self;
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn cst(v: f64) -> Self {
        v
    }
    fn scale(&self, k: f64) -> Self {
        self * k
    }
    fn add_const(&self, k: f64) -> Self {
        self + k
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn ln_gamma(&self) -> Self {
        special::ln_gamma(*self)
    }
    fn softplus(&self) -> Self {
        softplus(*self)
    }
    fn log1p_ratio(&self) -> Self {
        log1p_ratio_derivs(*self)[0]
    }
}

impl<const N: usize> Scalar for Jet<N> {
    fn value(&self) -> f64 {
        self.v
    }
    fn cst(v: f64) -> Self {
        Jet::constant(v)
    }
    fn scale(&self, k: f64) -> Self {
        Jet::scale(self, k)
    }
    fn add_const(&self, k: f64) -> Self {
        Jet::add_const(self, k)
    }
    fn exp(&self) -> Self {
        Jet::exp(self)
    }
    fn ln(&self) -> Self {
        Jet::ln(self)
    }
    fn ln_gamma(&self) -> Self {
        let x = self.v;
        self.compose(
            special::ln_gamma(x),
            special::digamma(x),
            special::trigamma(x),
            special::tetragamma(x),
        )
    }
    fn softplus(&self) -> Self {
        let x = self.v;
        let p = logistic(x);
        let q = 1.0 - p;
        self.compose(softplus(x), p, p * q, p * q * (q - p))
    }
    fn log1p_ratio(&self) -> Self {
        let [f0, f1, f2, f3] = log1p_ratio_derivs(self.v);
        self.compose(f0, f1, f2, f3)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const SERIES_RADIUS: f64 = 0.1;
const SERIES_TERMS: usize = 40;

/// `P(s) = ln(1+s)/s` and its first three derivatives.
///
/// Near zero the Taylor series is summed directly; elsewhere the derivatives
/// follow from differentiating `s P(s) = ln(1+s)`.
pub fn log1p_ratio_derivs(s: f64) -> [f64; 4] {
    if s.abs() < SERIES_RADIUS {
        log1p_ratio_series(s)
    } else {
        log1p_ratio_recursion(s)
    }
}

/// `P(s) = sum_k (-s)^k / (k+1)`, differentiated term by term.
fn log1p_ratio_series(s: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    for k in (0..SERIES_TERMS).rev() {
        let kf = k as f64;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let coef = sign / (kf + 1.0);
        out[0] = out[0] * s + coef;
        if k >= 1 {
            out[1] = out[1] * s + coef * kf;
        }
        if k >= 2 {
            out[2] = out[2] * s + coef * kf * (kf - 1.0);
        }
        if k >= 3 {
            out[3] = out[3] * s + coef * kf * (kf - 1.0) * (kf - 2.0);
        }
    }
    out
}

/// Derivatives from differentiating `s P(s) = ln(1+s)` repeatedly.
fn log1p_ratio_recursion(s: f64) -> [f64; 4] {
    let inv = 1.0 / (1.0 + s);
    let p0 = s.ln_1p() / s;
    let p1 = (inv - p0) / s;
    let p2 = (-inv * inv - 2.0 * p1) / s;
    let p3 = (2.0 * inv * inv * inv - 3.0 * p2) / s;
    [p0, p1, p2, p3]
}
