//! Smoothing-parameter selection by approximate EM on the log-marginal likelihood.
//!
//! Each outer iteration fits `beta` at the current `lambda`, computes
//!
//! ```text
//! c_j = beta_j' S_j beta_j + Tr[H_P^{-1} (S_j + dH/dlambda_j)]
//! ```
//!
//! and sets `lambda_j <- rank(S_j) / c_j`. The gradient of the log-marginal
//! likelihood at the current iterate is `G_j = (rank(S_j)/lambda_j - c_j) / 2`;
//! for a component that was just updated this equals the difference
//! `(c_prev - c_now) / 2` of successive curvatures.
//!
//! `dH/dlambda_j` enters only through a trace, so the third-order term is
//! reduced to one pass over the data per iteration:
//! `Tr(A dH(v)) = g . v` with `g` from
//! [`ModelDesign::third_order_trace_gradient`] and `v_j = -H_P^{-1} S_j beta`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{DesignLayout, ModelDesign};
use crate::error::{FitError, SolveError};
use crate::families::Family;
use crate::solver::{self, NewtonSettings, PenalizedFit};

/// Bounds keeping `lambda` representable; a component reaching one is frozen there.
pub const LAMBDA_MIN: f64 = 1e-12;
pub const LAMBDA_MAX: f64 = 1e15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmSettings {
    /// Convergence when `|lambda_j G_j| < tol` for every active component
    /// (the gradient with respect to `log lambda_j`).
    pub tol: f64,
    pub max_outer: usize,
    /// Starting smoothing parameters; one value for all, or one per term.
    pub lambda0: Vec<f64>,
    /// Component `j` is frozen once its update changes `l_P` at fixed `beta`
    /// by less than `pll_tol * (1 + |l_P|)`.
    pub pll_tol: f64,
    /// Stop updating a component once it meets either test. When false every
    /// component is updated until all meet the gradient test together, and
    /// `pll_tol` is ignored.
    pub freeze: bool,
    pub parallel_mstep: bool,
    pub newton: NewtonSettings,
}

impl Default for EmSettings {
    fn default() -> Self {
        EmSettings {
            tol: 1e-4,
            max_outer: 200,
            lambda0: vec![1.0],
            pll_tol: 1e-7,
            freeze: true,
            parallel_mstep: true,
            newton: NewtonSettings::default(),
        }
    }
}

impl EmSettings {
    fn initial_lambda(&self, q: usize) -> Vec<f64> {
        match self.lambda0.len() {
            0 => vec![1.0; q],
            1 => vec![self.lambda0[0]; q],
            _ => self.lambda0.clone(),
        }
    }
}

/// Why a smoothing parameter stopped moving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermStatus {
    /// Still being updated.
    Active,
    /// Log-marginal gradient below tolerance.
    Converged,
    /// Further updates no longer change the penalized log-likelihood.
    Stagnant,
    /// Reached `LAMBDA_MIN` or `LAMBDA_MAX`.
    Bound,
    /// No penalized coefficients left after identifiability drops.
    Empty,
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIterate {
    pub outer_index: usize,
    pub lambda: Vec<f64>,
    pub c: Vec<f64>,
    /// `d l_M / d lambda_j` at `lambda`.
    pub gradient: Vec<f64>,
    pub status: Vec<TermStatus>,
    pub loglik_pen: f64,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSummary {
    pub label: String,
    pub parameter: usize,
    pub lambda: f64,
    pub rank: usize,
    /// Effective degrees of freedom, `tr[(H_P^{-1} H)_jj]` over the term's block.
    pub edf: f64,
    pub status: TermStatus,
}

/// Final fit with the posterior approximation `N(beta, H_P^{-1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: Family,
    pub coef_names: Vec<String>,
    pub layout: Option<DesignLayout>,
    /// One entry per design coefficient; dropped coefficients are zero.
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
    /// `H_P^{-1}` on all coefficients, zero rows and columns at dropped ones.
    pub covariance: DMatrix<f64>,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub loglik: f64,
    pub loglik_pen: f64,
    pub terms: Vec<TermSummary>,
    pub trajectory: Vec<EmIterate>,
    pub outer_iterations: usize,
    pub newton_iterations: usize,
    pub converged: bool,
}

impl FitResult {
    /// Linear predictors `theta^(d)` on the design's own rows, `[d][i]`.
    pub fn fitted(&self, design: &ModelDesign) -> Vec<Vec<f64>> {
        design.predictors(&self.beta)
    }
}

/// Quantities shared by every `c_j` at one converged inner fit.
pub struct MStep<'a> {
    design: &'a ModelDesign,
    beta: Vec<f64>,
    /// `H_P^{-1}`
    pub inverse: DMatrix<f64>,
    /// Third-order trace vector.
    trace_grad: DVector<f64>,
}

impl<'a> MStep<'a> {
    /// `fit` must have no dropped coefficients relative to `design`.
    pub fn new(design: &'a ModelDesign, fit: &PenalizedFit) -> Result<Self, SolveError> {
        let inverse = fit.covariance();
        let trace_grad = design
            .third_order_trace_gradient(&fit.beta, &inverse)
            .map_err(SolveError::InfeasibleStart)?;
        Ok(MStep {
            design,
            beta: fit.beta.clone(),
            inverse,
            trace_grad,
        })
    }

    /// `c_j` for penalty `j`.
    pub fn c(&self, j: usize) -> f64 {
        let pen = &self.design.penalties[j];
        let r = pen.range();
        let bj = DVector::from_column_slice(&self.beta[r.clone()]);
        let sb = &pen.matrix * &bj;
        let quad = bj.dot(&sb);
        // Tr(A S_j) only touches the diagonal block of A
        let a_jj = self.inverse.view((r.start, r.start), (r.len(), r.len()));
        let trace_s = a_jj.component_mul(&pen.matrix).sum();
        // v_j = -A S_j beta
        let a_cols = self.inverse.columns(r.start, r.len());
        let v = -(a_cols * sb);
        let trace_dh = self.trace_grad.dot(&v);
        quad + trace_s + trace_dh
    }

    /// `d beta / d lambda_j = -H_P^{-1} S_j beta`.
    pub fn beta_derivative(&self, j: usize) -> DVector<f64> {
        let pen = &self.design.penalties[j];
        let r = pen.range();
        let bj = DVector::from_column_slice(&self.beta[r.clone()]);
        -(self.inverse.columns(r.start, r.len()) * (&pen.matrix * bj))
    }
}

/// `c_{k,j}` at a converged inner fit.
pub fn compute_c(design: &ModelDesign, fit: &PenalizedFit, j: usize) -> Result<f64, FitError> {
    let m = MStep::new(design, fit).map_err(|source| FitError::Solve { outer: 0, source })?;
    let c = m.c(j);
    if c > 0.0 && c.is_finite() {
        Ok(c)
    } else {
        Err(FitError::InvalidCurvature { j, c })
    }
}

/// `lambda_j = rank_j / c_j`
pub fn update_lambda(c: &[f64], ranks: &[usize]) -> Vec<f64> {
    c.iter().zip(ranks).map(|(c, &r)| r as f64 / c).collect()
}

/// `(c_prev - c_next) / 2`
pub fn oakes_gradient(c_prev: &[f64], c_next: &[f64]) -> Vec<f64> {
    c_prev.iter().zip(c_next).map(|(a, b)| 0.5 * (a - b)).collect()
}

/// Re-expresses a fit with drops as a fit on the restricted design.
fn compact(fit: PenalizedFit) -> PenalizedFit {
    let beta = fit.kept_beta();
    let r = beta.len();
    PenalizedFit {
        beta,
        kept: (0..r).collect(),
        dropped: Vec::new(),
        rank: r,
        ..fit
    }
}

/// Runs the outer iteration to convergence.
pub fn em_fit(design: &ModelDesign, settings: &EmSettings) -> Result<FitResult, FitError> {
    let q = design.q();
    let mut lambda = settings.initial_lambda(q);
    if lambda.len() != q || lambda.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(FitError::Solve {
            outer: 0,
            source: SolveError::Dimension(format!(
                "need {q} positive starting smoothing parameters, got {:?}",
                settings.lambda0
            )),
        });
    }
    let mut active = design.clone();
    let mut map: Vec<usize> = (0..design.p()).collect();
    let mut dropped_all: Vec<usize> = Vec::new();
    let mut beta = design.initial_beta();
    let mut status: Vec<TermStatus> = design
        .penalties
        .iter()
        .map(|p| {
            if p.rank == 0 {
                TermStatus::Empty
            } else {
                TermStatus::Active
            }
        })
        .collect();
    let mut c = vec![0.0; q];
    let mut trajectory = Vec::new();
    let mut newton_total = 0;
    let mut outer = 0;
    loop {
        let fit = solver::maximize_penalized(&active, &lambda, &beta, &settings.newton)
            .map_err(|source| FitError::Solve { outer, source })?;
        newton_total += fit.iterations;
        let fit = if fit.dropped.is_empty() {
            fit
        } else {
            dropped_all.extend(fit.dropped.iter().map(|&k| map[k]));
            dropped_all.sort_unstable();
            map = fit.kept.iter().map(|&k| map[k]).collect();
            active = active.restrict(&fit.kept);
            for (s, pen) in status.iter_mut().zip(&active.penalties) {
                if pen.rank == 0 {
                    *s = TermStatus::Empty;
                }
            }
            compact(fit)
        };
        beta = fit.beta.clone();

        let mstep = MStep::new(&active, &fit).map_err(|source| FitError::Solve { outer, source })?;
        // frozen terms are evaluated too, for the diagnostics
        let live: Vec<usize> = (0..q).filter(|&j| status[j] != TermStatus::Empty).collect();
        let cs: Vec<(usize, f64)> = if settings.parallel_mstep {
            live.par_iter().map(|&j| (j, mstep.c(j))).collect()
        } else {
            live.iter().map(|&j| (j, mstep.c(j))).collect()
        };
        let mut gradient = vec![0.0; q];
        for (j, cj) in cs {
            c[j] = cj;
            gradient[j] = 0.5 * (active.penalties[j].rank as f64 / lambda[j] - cj);
            if !settings.freeze && status[j] == TermStatus::Converged {
                status[j] = TermStatus::Active;
            }
            if status[j] != TermStatus::Active {
                continue;
            }
            if !(cj > 0.0 && cj.is_finite()) {
                return Err(FitError::InvalidCurvature { j, c: cj });
            }
            if (lambda[j] * gradient[j]).abs() < settings.tol {
                status[j] = TermStatus::Converged;
            }
        }
        trajectory.push(EmIterate {
            outer_index: outer,
            lambda: lambda.clone(),
            c: c.clone(),
            gradient,
            status: status.clone(),
            loglik_pen: fit.loglik_pen,
            newton_iterations: fit.iterations,
        });

        let done = !status.contains(&TermStatus::Active);
        if done || outer + 1 >= settings.max_outer {
            let result = finish(
                design,
                &active,
                &map,
                &dropped_all,
                &fit,
                &mstep,
                &lambda,
                &status,
                trajectory,
                outer + 1,
                newton_total,
                done,
            );
            if done {
                return Ok(result);
            }
            return Err(FitError::NonConvergence {
                iterations: outer + 1,
                best: Box::new(result),
            });
        }

        let pll = settings.pll_tol * (1.0 + fit.loglik_pen.abs());
        for j in 0..q {
            let update = match status[j] {
                TermStatus::Active => true,
                TermStatus::Converged => !settings.freeze,
                _ => false,
            };
            if !update {
                continue;
            }
            let pen = &active.penalties[j];
            let next = pen.rank as f64 / c[j];
            let clamped = next.clamp(LAMBDA_MIN, LAMBDA_MAX);
            let change = 0.5 * (clamped - lambda[j]).abs() * pen.quadratic(&beta);
            lambda[j] = clamped;
            if clamped != next {
                status[j] = TermStatus::Bound;
            } else if settings.freeze && change < pll {
                status[j] = TermStatus::Stagnant;
            }
        }
        outer += 1;
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    design: &ModelDesign,
    active: &ModelDesign,
    map: &[usize],
    dropped: &[usize],
    fit: &PenalizedFit,
    mstep: &MStep,
    lambda: &[f64],
    status: &[TermStatus],
    trajectory: Vec<EmIterate>,
    outer_iterations: usize,
    newton_iterations: usize,
    converged: bool,
) -> FitResult {
    let p = design.p();
    let mut beta = vec![0.0; p];
    for (i, &g) in map.iter().enumerate() {
        beta[g] = fit.beta[i];
    }
    let mut covariance = DMatrix::zeros(p, p);
    for (i, &gi) in map.iter().enumerate() {
        for (j, &gj) in map.iter().enumerate() {
            covariance[(gi, gj)] = mstep.inverse[(i, j)];
        }
    }
    // A (H_P - S_lambda) = I - A S_lambda
    let a_s = &mstep.inverse * active.penalty_matrix(lambda);
    let terms = active
        .penalties
        .iter()
        .enumerate()
        .map(|(j, pen)| {
            let edf = pen.range().map(|i| 1.0 - a_s[(i, i)]).sum();
            TermSummary {
                label: pen.label.clone(),
                parameter: pen.parameter,
                lambda: lambda[j],
                rank: pen.rank,
                edf,
                status: status[j],
            }
        })
        .collect();
    FitResult {
        family: design.family,
        coef_names: design.coef_names.clone(),
        layout: design.layout.clone(),
        beta,
        lambda: lambda.to_vec(),
        covariance,
        kept: map.to_vec(),
        dropped: dropped.to_vec(),
        loglik: fit.loglik,
        loglik_pen: fit.loglik_pen,
        terms,
        trajectory,
        outer_iterations,
        newton_iterations,
        converged,
    }
}
