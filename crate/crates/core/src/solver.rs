//! Penalized Newton-Raphson for fixed smoothing parameters.
//!
//! Each iteration floors the eigenvalues of `H_P` before solving for the
//! step, then halves the step until `l_P` increases. Converged fits are
//! checked for unidentifiable coefficients with a column-pivoted QR of `H_P`;
//! any such coefficients are removed and the fit is repeated without them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::design::ModelDesign;
use crate::error::SolveError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonSettings {
    /// Convergence when `|U_P|_inf < grad_tol * (1 + |l_P|)`.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Eigenvalues of the diagonally scaled `H_P` are floored at
    /// `eig_floor * (1 + |largest eigenvalue|)`.
    pub eig_floor: f64,
    /// Initial step length, in (0, 1].
    pub init_rate: f64,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            grad_tol: 1e-7,
            max_iter: 200,
            max_halvings: 30,
            eig_floor: 1e-7,
            init_rate: 1.0,
        }
    }
}

/// Relative pivot threshold for the identifiability check.
pub const PIVOT_TOL: f64 = 1e-10;

/// Relative predicted gain below which a failed line search counts as
/// convergence: rounding in `l_P` hides anything smaller.
pub const FLAT_GAIN: f64 = 1e-10;

/// A converged penalized fit.
///
/// `beta` has one entry per coefficient of the design that was fitted, with
/// zeros at dropped positions; the score and Hessian cover kept coefficients only.
#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub beta: Vec<f64>,
    pub loglik: f64,
    pub loglik_pen: f64,
    /// `U_P` on the kept coefficients.
    pub grad_pen: DVector<f64>,
    /// `H_P` on the kept coefficients.
    pub hess_pen: DMatrix<f64>,
    pub rank: usize,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub iterations: usize,
    pub halvings_used: usize,
    /// `l_P` after the start and every accepted step.
    pub history: Vec<f64>,
}

impl PenalizedFit {
    /// Coefficients at the kept positions.
    pub fn kept_beta(&self) -> Vec<f64> {
        self.kept.iter().map(|&k| self.beta[k]).collect()
    }

    /// `H_P^{-1}` on the kept coefficients.
    pub fn covariance(&self) -> DMatrix<f64> {
        invert_spd(&self.hess_pen, NewtonSettings::default().eig_floor)
    }
}

/// Inverse of a symmetric matrix that should be positive definite, falling
/// back to the floored eigen-decomposition when Cholesky fails.
pub fn invert_spd(h: &DMatrix<f64>, eig_floor: f64) -> DMatrix<f64> {
    let n = h.nrows();
    let inv = match h.clone().cholesky() {
        Some(c) => c.solve(&DMatrix::identity(n, n)),
        None => {
            let eig = SymmetricEigen::new(h.clone());
            let floor = floor_for(&eig.eigenvalues, eig_floor);
            let d = eig.eigenvalues.map(|e| 1.0 / e.max(floor));
            &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
        }
    };
    crate::basis::symmetrize(&inv)
}

fn floor_for(eigenvalues: &DVector<f64>, rel: f64) -> f64 {
    let max = eigenvalues.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    rel * (1.0 + max)
}

/// Raises every eigenvalue of `h` below `eig_floor` to `eig_floor`.
pub fn stabilize(h: &DMatrix<f64>, eig_floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(h.clone());
    if eig.eigenvalues.iter().all(|&e| e >= eig_floor) {
        return h.clone();
    }
    let d = eig.eigenvalues.map(|e| e.max(eig_floor));
    crate::basis::symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()))
}

/// `stabilize(H_P)^{-1} U_P`, with the floor applied to the diagonally scaled
/// matrix `D^{-1/2} H_P D^{-1/2}`, `D = diag(H_P)`.
///
/// Scaling first keeps a very large smoothing parameter on one block from
/// flooring the curvature of every other block.
fn newton_direction(hp: &DMatrix<f64>, up: &DVector<f64>, eig_floor: f64) -> DVector<f64> {
    let n = hp.nrows();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = hp[(i, i)];
            if d > 0.0 && d.is_finite() {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| hp[(i, j)] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(scaled);
    let floor = floor_for(&eig.eigenvalues, eig_floor);
    let su = DVector::from_fn(n, |i, _| up[i] * scale[i]);
    let mut proj = eig.eigenvectors.tr_mul(&su);
    for (p, e) in proj.iter_mut().zip(eig.eigenvalues.iter()) {
        *p /= e.max(floor);
    }
    let mut delta = &eig.eigenvectors * proj;
    for (d, s) in delta.iter_mut().zip(&scale) {
        *d *= s;
    }
    delta
}

/// Result of the pivoted QR rank check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identifiability {
    pub rank: usize,
    /// Column order chosen by the pivoting.
    pub permutation: Vec<usize>,
    /// Sorted indices of identifiable coefficients.
    pub kept: Vec<usize>,
    /// Sorted indices of removed coefficients.
    pub dropped: Vec<usize>,
}

/// Rank of `h` from a Householder QR with column pivoting: the leading
/// diagonal entries of `R` with `|R_ii| > PIVOT_TOL * |R_11|`.
pub fn detect_identifiability(h: &DMatrix<f64>) -> Result<Identifiability, SolveError> {
    let (m, p) = h.shape();
    let mut a = h.clone();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut diag = Vec::with_capacity(p.min(m));
    for k in 0..p.min(m) {
        let norm2 = |a: &DMatrix<f64>, j: usize| (k..m).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>();
        let mut best = k;
        let mut best_norm = norm2(&a, k);
        for j in k + 1..p {
            let nj = norm2(&a, j);
            if nj > best_norm {
                best = j;
                best_norm = nj;
            }
        }
        if best != k {
            a.swap_columns(k, best);
            perm.swap(k, best);
        }
        let norm = best_norm.sqrt();
        if norm == 0.0 {
            diag.push(0.0);
            continue;
        }
        let alpha = if a[(k, k)] >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| a[(i, k)]).collect();
        v[0] -= alpha;
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv > 0.0 {
            for j in k..p {
                let dot: f64 = v.iter().enumerate().map(|(i, vi)| vi * a[(k + i, j)]).sum();
                let f = 2.0 * dot / vtv;
                for (i, vi) in v.iter().enumerate() {
                    a[(k + i, j)] -= f * vi;
                }
            }
        }
        diag.push(alpha.abs());
    }
    let lead = diag.first().copied().unwrap_or(0.0);
    let rank = if lead > 0.0 {
        diag.iter().take_while(|&&d| d > PIVOT_TOL * lead).count()
    } else {
        0
    };
    if rank == 0 {
        return Err(SolveError::Unidentifiable);
    }
    let mut kept = perm[..rank].to_vec();
    let mut dropped = perm[rank..].to_vec();
    kept.sort_unstable();
    dropped.sort_unstable();
    Ok(Identifiability {
        rank,
        permutation: perm,
        kept,
        dropped,
    })
}

struct NewtonRun {
    beta: DVector<f64>,
    loglik: f64,
    loglik_pen: f64,
    grad_pen: DVector<f64>,
    hess_pen: DMatrix<f64>,
    iterations: usize,
    halvings: usize,
    history: Vec<f64>,
}

fn newton(design: &ModelDesign, lambda: &[f64], beta0: &[f64], s: &NewtonSettings) -> Result<NewtonRun, SolveError> {
    let p = design.p();
    if beta0.len() != p || lambda.len() != design.q() {
        return Err(SolveError::Dimension(format!(
            "beta has {} entries and lambda {}, design has p = {p}, q = {}",
            beta0.len(),
            lambda.len(),
            design.q()
        )));
    }
    let s_lam = design.penalty_matrix(lambda);
    let penalized = |b: &[f64]| -> f64 {
        match design.loglik(b) {
            Ok(l) => l - 0.5 * design.penalty_quadratic(lambda, b),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let mut beta = DVector::from_column_slice(beta0);
    let mut acc = design
        .accumulate(beta.as_slice())
        .map_err(SolveError::InfeasibleStart)?;
    let mut lp = acc.loglik - 0.5 * design.penalty_quadratic(lambda, beta.as_slice());
    let mut history = vec![lp];
    let mut iterations = 0;
    let mut halvings = 0;
    loop {
        let up = &acc.grad - &s_lam * &beta;
        let hp = &acc.hess + &s_lam;
        let gnorm = up.amax();
        let scale = 1.0 + lp.abs();
        if gnorm < s.grad_tol * scale {
            // one more full step removes the residual error of the last step
            let delta = newton_direction(&hp, &up, s.eig_floor);
            let trial = &beta + &delta;
            let lt = penalized(trial.as_slice());
            if lt > lp {
                if let Ok(next) = design.accumulate(trial.as_slice()) {
                    beta = trial;
                    lp = lt;
                    acc = next;
                    history.push(lp);
                    iterations += 1;
                    let up = &acc.grad - &s_lam * &beta;
                    return Ok(NewtonRun {
                        beta,
                        loglik: acc.loglik,
                        loglik_pen: lp,
                        grad_pen: up,
                        hess_pen: crate::basis::symmetrize(&(&acc.hess + &s_lam)),
                        iterations,
                        halvings,
                        history,
                    });
                }
            }
            return Ok(NewtonRun {
                beta,
                loglik: acc.loglik,
                loglik_pen: lp,
                grad_pen: up,
                hess_pen: crate::basis::symmetrize(&hp),
                iterations,
                halvings,
                history,
            });
        }
        if iterations >= s.max_iter {
            return Err(SolveError::NonConvergence {
                iterations,
                grad_norm: gnorm,
                best_beta: beta.as_slice().to_vec(),
            });
        }
        let delta = newton_direction(&hp, &up, s.eig_floor);
        let predicted = delta.dot(&up);
        let mut gamma = s.init_rate;
        let mut accepted = None;
        for h in 0..=s.max_halvings {
            let trial = &beta + &delta * gamma;
            let lt = penalized(trial.as_slice());
            if lt > lp {
                accepted = Some((trial, lt));
                halvings += h;
                break;
            }
            gamma *= 0.5;
        }
        match accepted {
            Some((trial, lt)) => {
                acc = design
                    .accumulate(trial.as_slice())
                    .map_err(SolveError::InfeasibleStart)?;
                beta = trial;
                lp = lt;
                history.push(lp);
                iterations += 1;
            }
            None if 0.5 * predicted.abs()
                <= FLAT_GAIN * (scale + penalty_magnitude(design, lambda, beta.as_slice())) =>
            {
                // no representable increase is left: flat at working precision
                return Ok(NewtonRun {
                    beta,
                    loglik: acc.loglik,
                    loglik_pen: lp,
                    grad_pen: up,
                    hess_pen: crate::basis::symmetrize(&hp),
                    iterations,
                    halvings,
                    history,
                });
            }
            None => {
                return Err(SolveError::Stalled {
                    halvings: s.max_halvings,
                    grad_norm: gnorm,
                    best_beta: beta.as_slice().to_vec(),
                });
            }
        }
    }
}

/// `sum_j lambda_j |beta_j|' |S_j| |beta_j|`, the size of the terms whose
/// cancellation gives the penalty; sets its rounding level.
fn penalty_magnitude(design: &ModelDesign, lambda: &[f64], beta: &[f64]) -> f64 {
    design
        .penalties
        .iter()
        .zip(lambda)
        .map(|(pen, l)| {
            let b = &beta[pen.range()];
            let mut acc = 0.0;
            for (i, bi) in b.iter().enumerate() {
                for (j, bj) in b.iter().enumerate() {
                    acc += pen.matrix[(i, j)].abs() * bi.abs() * bj.abs();
                }
            }
            l * acc
        })
        .sum()
}

/// Maximizes `l_P(beta; lambda)` from `beta0`.
///
/// Unidentifiable coefficients found at convergence are dropped and the fit
/// is repeated on the remaining ones; the returned fit lists them.
pub fn maximize_penalized(
    design: &ModelDesign,
    lambda: &[f64],
    beta0: &[f64],
    settings: &NewtonSettings,
) -> Result<PenalizedFit, SolveError> {
    if design.p() == 0 {
        return Err(SolveError::Unidentifiable);
    }
    let run = newton(design, lambda, beta0, settings)?;
    let ident = detect_identifiability(&run.hess_pen)?;
    if ident.dropped.is_empty() {
        let p = design.p();
        return Ok(PenalizedFit {
            beta: run.beta.as_slice().to_vec(),
            loglik: run.loglik,
            loglik_pen: run.loglik_pen,
            grad_pen: run.grad_pen,
            hess_pen: run.hess_pen,
            rank: p,
            kept: (0..p).collect(),
            dropped: Vec::new(),
            iterations: run.iterations,
            halvings_used: run.halvings,
            history: run.history,
        });
    }
    let sub = design.restrict(&ident.kept);
    let mut start: Vec<f64> = ident.kept.iter().map(|&k| run.beta[k]).collect();
    if sub.loglik(&start).is_err() {
        // zeroing the dropped coefficients moved some row outside the support
        start = sub.initial_beta();
    }
    let inner = maximize_penalized(&sub, lambda, &start, settings)?;
    let kept: Vec<usize> = inner.kept.iter().map(|&k| ident.kept[k]).collect();
    let mut dropped: Vec<usize> = ident
        .dropped
        .iter()
        .copied()
        .chain(inner.dropped.iter().map(|&k| ident.kept[k]))
        .collect();
    dropped.sort_unstable();
    let mut beta = vec![0.0; design.p()];
    for (i, &k) in ident.kept.iter().enumerate() {
        beta[k] = inner.beta[i];
    }
    let mut history = run.history;
    history.extend(inner.history);
    Ok(PenalizedFit {
        beta,
        loglik: inner.loglik,
        loglik_pen: inner.loglik_pen,
        grad_pen: inner.grad_pen,
        hess_pen: inner.hess_pen,
        rank: kept.len(),
        kept,
        dropped,
        iterations: run.iterations + inner.iterations,
        halvings_used: run.halvings + inner.halvings_used,
        history,
    })
}
