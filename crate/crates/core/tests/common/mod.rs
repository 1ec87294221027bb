#![allow(dead_code)]

use gamem::basis::{BasisKind, BasisSpec};
use gamem::design::{ModelDesign, ModelSpec, ParameterSpec, Table};
use gamem::families::Family;
use gamem::solver::{maximize_penalized, NewtonSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tight() -> NewtonSettings {
    NewtonSettings {
        grad_tol: 1e-11,
        ..Default::default()
    }
}

/// Laplace approximation of the log-marginal likelihood, constants dropped:
/// `l_P(beta_hat) + log|S_lambda|_+ / 2 - log det H_P / 2`.
pub fn laplace_lm(design: &ModelDesign, lambda: &[f64], beta0: &[f64]) -> f64 {
    let fit = maximize_penalized(design, lambda, beta0, &tight()).expect("inner fit");
    assert!(fit.dropped.is_empty());
    let chol = fit.hess_pen.clone().cholesky().expect("H_P positive definite");
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    // penalties occupy disjoint blocks, so |S_lambda|_+ factorizes
    let pdet: f64 = design
        .penalties
        .iter()
        .zip(lambda)
        .map(|(p, l)| p.rank as f64 * l.ln())
        .sum();
    fit.loglik_pen + 0.5 * pdet - 0.5 * logdet
}

/// Central differences of `laplace_lm` in `log lambda`.
pub fn laplace_grad_rho(design: &ModelDesign, lambda: &[f64], beta0: &[f64], h: f64) -> Vec<f64> {
    (0..lambda.len())
        .map(|j| {
            let mut up = lambda.to_vec();
            let mut dn = lambda.to_vec();
            up[j] *= h.exp();
            dn[j] *= (-h).exp();
            (laplace_lm(design, &up, beta0) - laplace_lm(design, &dn, beta0)) / (2.0 * h)
        })
        .collect()
}

/// Single-predictor model with one cubic regression spline per column.
pub fn one_block(family: Family, cols: &[&str], k: usize) -> ModelSpec {
    let p = cols.iter().fold(ParameterSpec::intercept_only(), |p, c| {
        p.smooth(BasisSpec::new(BasisKind::CubicRegression, k, *c))
    });
    let mut parameters = vec![p];
    parameters.extend((1..family.dim()).map(|_| ParameterSpec::intercept_only()));
    ModelSpec {
        family,
        response: "y".into(),
        parameters,
    }
}

/// Poisson data with log-rate `sin(2 pi x1) / 2 + x2^2`.
pub fn poisson_table(n: usize, seed: u64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let x2: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let y: Vec<f64> = x1
        .iter()
        .zip(&x2)
        .map(|(a, b)| {
            let eta = 0.5 * (2.0 * std::f64::consts::PI * a).sin() + b * b;
            Family::Poisson.sample(&[eta], &mut rng)
        })
        .collect();
    Table::new().with("x1", x1).with("x2", x2).with("y", y)
}

/// Gamma data: log-shape `1 + sin(pi x1) / 2`, negative log-scale `x2 - 1`.
pub fn gamma_table(n: usize, seed: u64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let x2: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let y: Vec<f64> = x1
        .iter()
        .zip(&x2)
        .map(|(a, b)| {
            let th = [1.0 + 0.5 * (std::f64::consts::PI * a).sin(), b - 1.0];
            Family::Gamma.sample(&th, &mut rng)
        })
        .collect();
    Table::new().with("x1", x1).with("x2", x2).with("y", y)
}
