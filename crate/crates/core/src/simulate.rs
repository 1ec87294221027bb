//! Simulation study: seven test functions, six generative models, integrated MSE.
//!
//! Errors are reported on two scales. `mse` compares the distribution
//! parameters themselves (mean, standard deviation, rate, shape, scale,
//! success probability, location); `mse_functional` compares the additive
//! functionals `mu`, `sigma`, `xi` before they are mapped into the family.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisKind, BasisSpec};
use crate::design::{ModelDesign, ModelSpec, ParameterSpec, Table};
use crate::em::{em_fit, EmSettings, FitResult};
use crate::error::FitError;
use crate::families::Family;

pub const N_COVARIATES: usize = 7;

/// The test functions `f_1 .. f_7` on `[0, 1]`.
pub fn eval_f(j: usize, x: f64) -> f64 {
    match j {
        1 => {
            let u = 1.0 - x;
            1e4 * x.powi(3) * u.powi(6) * (u.powi(4) + 20.0 * x.powi(8))
        }
        2 => 2.0 * (PI * x).sin(),
        3 => (2.0 * x).exp(),
        4 => 0.1 * x * x,
        5 => 0.5 * (2.0 * PI * x).sin(),
        6 => -0.2 - 0.5 * x.powi(3),
        7 => -0.5 * x * x + (PI * x).sin(),
        _ => panic!("test functions are numbered 1 to 7, got {j}"),
    }
}

/// Covariates `x_j` entering each functional parameter of `family`'s model.
pub fn covariates(family: Family) -> &'static [&'static [usize]] {
    const MU: &[usize] = &[1, 2, 3];
    const SIGMA: &[usize] = &[4, 5, 6];
    const XI: &[usize] = &[7];
    match family {
        Family::Poisson | Family::Exponential | Family::Binomial => &[MU],
        Family::Gaussian | Family::Gamma => &[MU, SIGMA],
        Family::Gev => &[MU, SIGMA, XI],
    }
}

/// Labels of the functional parameters, in predictor order.
pub fn parameter_labels(family: Family) -> &'static [&'static str] {
    &["mu", "sigma", "xi"][..family.dim()]
}

/// Functional parameter `d` as the sum of its test functions.
pub fn functional(family: Family, d: usize, x: &[f64; N_COVARIATES]) -> f64 {
    covariates(family)[d].iter().map(|&j| eval_f(j, x[j - 1])).sum()
}

/// Maps functional parameters to the family's linear predictors.
pub fn predictor_from_functional(family: Family, f: &[f64]) -> Vec<f64> {
    f.iter().enumerate().map(|(d, &v)| predictor_at(family, d, v)).collect()
}

fn predictor_at(family: Family, d: usize, f: f64) -> f64 {
    match (family, d) {
        (Family::Poisson | Family::Exponential, _) | (Family::Gamma, 0) => f / 6.0,
        (Family::Binomial, _) => (f - 5.0) / 6.0,
        _ => f,
    }
}

/// Distribution parameter `d` implied by functional value `f`.
pub fn natural_from_functional(family: Family, d: usize, f: f64) -> f64 {
    family.response_scale(d, predictor_at(family, d, f))
}

/// Inverse of [`predictor_from_functional`], applied to predictor `d`.
pub fn functional_from_predictor(family: Family, d: usize, eta: f64) -> f64 {
    match (family, d) {
        (Family::Poisson | Family::Exponential, _) | (Family::Gamma, 0) => 6.0 * eta,
        (Family::Binomial, _) => 6.0 * eta + 5.0,
        _ => eta,
    }
}

/// One simulated training set.
#[derive(Debug, Clone)]
pub struct Replicate {
    /// Columns `x1 .. x7` and `y`.
    pub data: Table,
    /// True functional parameters, `[d][i]`.
    pub truth: Vec<Vec<f64>>,
}

/// Draws `n` observations: covariates column by column, then responses.
pub fn generate_replicate<R: Rng + ?Sized>(family: Family, n: usize, rng: &mut R) -> Replicate {
    let xs: Vec<Vec<f64>> = (0..N_COVARIATES)
        .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
        .collect();
    let dim = family.dim();
    let mut truth = vec![Vec::with_capacity(n); dim];
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let x: [f64; N_COVARIATES] = std::array::from_fn(|j| xs[j][i]);
        let f: Vec<f64> = (0..dim).map(|d| functional(family, d, &x)).collect();
        y.push(family.sample(&predictor_from_functional(family, &f), rng));
        for (t, v) in truth.iter_mut().zip(f) {
            t.push(v);
        }
    }
    let mut data = Table::new();
    for (j, col) in xs.into_iter().enumerate() {
        data = data.with(format!("x{}", j + 1), col);
    }
    Replicate {
        data: data.with("y", y),
        truth,
    }
}

/// Random stream of replicate `r` under master seed `seed`.
pub fn replicate_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

/// Model with one cubic regression spline of dimension `k` per covariate.
pub fn model_spec(family: Family, k: usize) -> ModelSpec {
    let parameters = covariates(family)
        .iter()
        .map(|cols| {
            cols.iter().fold(ParameterSpec::intercept_only(), |p, &j| {
                p.smooth(BasisSpec::new(BasisKind::CubicRegression, k, format!("x{j}")))
            })
        })
        .collect();
    ModelSpec {
        family,
        response: "y".into(),
        parameters,
    }
}

/// `(1/n) sum (a_i - b_i)^2`
pub fn mse(truth: &[f64], fitted: &[f64]) -> f64 {
    assert_eq!(truth.len(), fitted.len(), "mse needs equal lengths");
    truth.iter().zip(fitted).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / truth.len() as f64
}

/// Fitted functional parameters of a result on its own design, `[d][i]`.
pub fn fitted_functionals(family: Family, design: &ModelDesign, fit: &FitResult) -> Vec<Vec<f64>> {
    fit.fitted(design)
        .into_iter()
        .enumerate()
        .map(|(d, eta)| {
            eta.into_iter()
                .map(|e| functional_from_predictor(family, d, e))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub family: Family,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub k: usize,
    pub em: EmSettings,
    /// Fit replicates concurrently. Timings then include contention.
    pub parallel: bool,
}

impl StudyConfig {
    pub fn new(family: Family, n: usize, replicates: usize, seed: u64) -> Self {
        StudyConfig {
            family,
            n,
            replicates,
            seed,
            k: 10,
            em: EmSettings::default(),
            parallel: false,
        }
    }

    /// Total number of coefficients of the fitted model.
    pub fn total_basis_size(&self) -> usize {
        covariates(self.family)
            .iter()
            .map(|cols| 1 + cols.len() * (self.k - 1))
            .sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.replicates == 0 {
            return Err("at least one replicate is required".into());
        }
        if self.k < 4 {
            return Err(format!("basis dimension must be at least 4, got {}", self.k));
        }
        let need = 10 * self.total_basis_size();
        if self.n < need {
            return Err(format!("n = {} is below 10 x total basis size = {need}", self.n));
        }
        Ok(())
    }
}

/// One row of the study report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub model: String,
    pub replicate: usize,
    pub parameter: String,
    /// On the distribution-parameter scale. Missing when the fit produced
    /// no usable estimate.
    pub mse: Option<f64>,
    pub mse_functional: Option<f64>,
    pub seconds: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub parameter: String,
    pub converged: usize,
    pub failed: usize,
    /// Over converged replicates.
    pub mean_mse: f64,
    pub var_mse: f64,
    pub mean_mse_functional: f64,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub summaries: Vec<ParameterSummary>,
}

/// Outcome of fitting one replicate.
#[derive(Debug)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub seconds: f64,
    pub fit: Result<FitResult, FitError>,
    /// Per parameter, distribution-parameter scale.
    pub mse: Option<Vec<f64>>,
    pub mse_functional: Option<Vec<f64>>,
}

/// Both error scales of a fit against the truth: `(natural, functional)`.
fn errors(family: Family, truth: &[Vec<f64>], fitted: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let natural =
        |d: usize, v: &[f64]| -> Vec<f64> { v.iter().map(|&f| natural_from_functional(family, d, f)).collect() };
    truth
        .iter()
        .zip(fitted)
        .enumerate()
        .map(|(d, (t, f))| (mse(&natural(d, t), &natural(d, f)), mse(t, f)))
        .unzip()
}

impl ReplicateOutcome {
    pub fn converged(&self) -> bool {
        self.fit.as_ref().is_ok_and(|f| f.converged)
    }
}

/// Generates and fits replicate `r`.
pub fn run_replicate(config: &StudyConfig, r: usize) -> ReplicateOutcome {
    let family = config.family;
    let mut rng = replicate_rng(config.seed, r);
    let rep = generate_replicate(family, config.n, &mut rng);
    let start = Instant::now();
    let design = ModelDesign::assemble(&model_spec(family, config.k), &rep.data);
    let fit = design
        .map_err(FitError::from)
        .and_then(|d| em_fit(&d, &config.em).map(|f| (d, f)));
    let seconds = start.elapsed().as_secs_f64();
    let (fit, errs) = match fit {
        Ok((design, fit)) => {
            let fitted = fitted_functionals(family, &design, &fit);
            (Ok(fit), Some(errors(family, &rep.truth, &fitted)))
        }
        Err(FitError::NonConvergence { iterations, best }) => {
            let design =
                ModelDesign::assemble(&model_spec(family, config.k), &rep.data).expect("design assembled once already");
            let fitted = fitted_functionals(family, &design, &best);
            let e = errors(family, &rep.truth, &fitted);
            (Err(FitError::NonConvergence { iterations, best }), Some(e))
        }
        Err(e) => (Err(e), None),
    };
    let (mse, mse_functional) = errs.unzip();
    ReplicateOutcome {
        replicate: r,
        seconds,
        fit,
        mse,
        mse_functional,
    }
}

/// Rows of one outcome, one per functional parameter.
pub fn outcome_rows(family: Family, outcome: &ReplicateOutcome) -> Vec<StudyRow> {
    parameter_labels(family)
        .iter()
        .enumerate()
        .map(|(d, label)| StudyRow {
            model: family.name().into(),
            replicate: outcome.replicate,
            parameter: (*label).into(),
            mse: outcome.mse.as_ref().map(|m| m[d]),
            mse_functional: outcome.mse_functional.as_ref().map(|m| m[d]),
            seconds: outcome.seconds,
            converged: outcome.converged(),
        })
        .collect()
}

/// Runs every replicate; failures are recorded, never raised.
pub fn run_study(config: &StudyConfig) -> StudyReport {
    let outcomes: Vec<ReplicateOutcome> = if config.parallel {
        (0..config.replicates)
            .into_par_iter()
            .map(|r| run_replicate(config, r))
            .collect()
    } else {
        (0..config.replicates).map(|r| run_replicate(config, r)).collect()
    };
    let rows: Vec<StudyRow> = outcomes.iter().flat_map(|o| outcome_rows(config.family, o)).collect();
    let summaries = summarize(config.family, &rows);
    StudyReport { rows, summaries }
}

/// Mean and sample variance of MSE over converged rows, per parameter.
pub fn summarize(family: Family, rows: &[StudyRow]) -> Vec<ParameterSummary> {
    parameter_labels(family)
        .iter()
        .map(|label| {
            let mine: Vec<&StudyRow> = rows.iter().filter(|r| r.parameter == *label).collect();
            let mut ok: Vec<&StudyRow> = mine
                .iter()
                .copied()
                .filter(|r| r.converged && r.mse.is_some())
                .collect();
            // fixed summation order whatever order replicates finished in
            ok.sort_by_key(|r| r.replicate);
            let m = ok.len();
            let values: Vec<f64> = ok.iter().filter_map(|r| r.mse).collect();
            let mean = values.iter().sum::<f64>() / m as f64;
            let mean_functional = ok.iter().filter_map(|r| r.mse_functional).sum::<f64>() / m as f64;
            let var = if m > 1 {
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64
            } else {
                f64::NAN
            };
            let mean_seconds = ok.iter().map(|r| r.seconds).sum::<f64>() / m as f64;
            ParameterSummary {
                parameter: (*label).into(),
                converged: m,
                failed: mine.len() - m,
                mean_mse: mean,
                var_mse: var,
                mean_mse_functional: mean_functional,
                mean_seconds,
            }
        })
        .collect()
}
