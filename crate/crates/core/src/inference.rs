//! Predictions, pointwise bands, GEV quantiles and simulation from a fit.
//!
//! Bands use the posterior approximation `beta ~ N(beta_hat, H_P^{-1})`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::design::{linear_predictor, BlockRows, DesignLayout, Table};
use crate::em::FitResult;
use crate::error::DesignError;
use crate::families::{gev, Family};

pub const DEFAULT_DRAWS: usize = 1000;

/// Two-sided standard normal quantile for a band of coverage `level`.
pub fn z_value(level: f64) -> f64 {
    assert!(level > 0.0 && level < 1.0, "level must lie in (0, 1), got {level}");
    Normal::standard().inverse_cdf(0.5 + 0.5 * level)
}

/// One predicted parameter with its pointwise band, on both scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterPrediction {
    pub name: String,
    pub response_name: String,
    pub eta: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `eta`, `lower` and `upper` mapped through the family's response map.
    pub response: Vec<f64>,
    pub response_lower: Vec<f64>,
    pub response_upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub level: f64,
    pub parameters: Vec<ParameterPrediction>,
    pub extrapolated: Vec<bool>,
}

fn layout(result: &FitResult) -> Result<&DesignLayout, DesignError> {
    result
        .layout
        .as_ref()
        .ok_or_else(|| DesignError::Dimension("fit was built from explicit blocks and has no basis layout".into()))
}

/// Design rows of every block on `newdata`.
pub fn design_rows(result: &FitResult, newdata: &Table) -> Result<Vec<BlockRows>, DesignError> {
    let layout = layout(result)?;
    let rows: Vec<BlockRows> = layout
        .blocks
        .iter()
        .map(|b| b.rows(newdata))
        .collect::<Result<_, _>>()?;
    let p: usize = rows.iter().map(|r| r.x.ncols()).sum();
    if p != result.beta.len() {
        return Err(DesignError::Dimension(format!(
            "layout has {p} coefficients, fit has {}",
            result.beta.len()
        )));
    }
    Ok(rows)
}

fn block_starts(rows: &[BlockRows]) -> Vec<usize> {
    rows.iter()
        .scan(0, |s, r| {
            let start = *s;
            *s += r.x.ncols();
            Some(start)
        })
        .collect()
}

/// Linear predictors `[d][i]` on new data, computed exactly as during fitting.
pub fn predict_eta(result: &FitResult, newdata: &Table) -> Result<Vec<Vec<f64>>, DesignError> {
    let rows = design_rows(result, newdata)?;
    let starts = block_starts(&rows);
    Ok(rows
        .iter()
        .zip(starts)
        .map(|(r, s)| {
            let b = &result.beta[s..s + r.x.ncols()];
            linear_predictor(&r.x, &r.offset, b, 0..newdata.nrows())
        })
        .collect())
}

/// Every linear predictor with standard errors and `level` pointwise bands.
pub fn predict_parameters(result: &FitResult, newdata: &Table, level: f64) -> Result<Prediction, DesignError> {
    let family = result.family;
    let z = z_value(level);
    let rows = design_rows(result, newdata)?;
    let starts = block_starts(&rows);
    let n = newdata.nrows();
    let mut extrapolated = vec![false; n];
    let mut parameters = Vec::with_capacity(rows.len());
    for (d, (r, &s)) in rows.iter().zip(&starts).enumerate() {
        let k = r.x.ncols();
        let eta = linear_predictor(&r.x, &r.offset, &result.beta[s..s + k], 0..n);
        let cov = result.covariance.view((s, s), (k, k));
        let xc = &r.x * cov;
        let se: Vec<f64> = (0..n).map(|i| xc.row(i).dot(&r.x.row(i)).max(0.0).sqrt()).collect();
        let lower: Vec<f64> = eta.iter().zip(&se).map(|(e, s)| e - z * s).collect();
        let upper: Vec<f64> = eta.iter().zip(&se).map(|(e, s)| e + z * s).collect();
        let map = |v: &[f64]| v.iter().map(|&e| family.response_scale(d, e)).collect::<Vec<_>>();
        // the gamma scale map is decreasing, so its bounds swap
        let (rl, ru) = if family.response_scale(d, 1.0) < family.response_scale(d, 0.0) {
            (map(&upper), map(&lower))
        } else {
            (map(&lower), map(&upper))
        };
        for (e, x) in extrapolated.iter_mut().zip(&r.extrapolated) {
            *e |= *x;
        }
        parameters.push(ParameterPrediction {
            name: family.parameter_names()[d].into(),
            response_name: family.response_names()[d].into(),
            response: map(&eta),
            eta,
            se,
            lower,
            upper,
            response_lower: rl,
            response_upper: ru,
        });
    }
    Ok(Prediction {
        level,
        parameters,
        extrapolated,
    })
}

/// GEV quantile at probability `p` for predictors `(mu, log sigma, xi)`.
pub fn gev_quantile(theta: &[f64], p: f64) -> f64 {
    gev::quantile(theta[0], theta[1], theta[2], p)
}

/// Quantile curve with a pointwise band from posterior draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCurve {
    pub probability: f64,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Draws `count` coefficient vectors from `N(beta_hat, covariance)`, `[draw][coef]`.
pub fn posterior_draws(result: &FitResult, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let kept = &result.kept;
    let r = kept.len();
    let cov = DMatrix::from_fn(r, r, |i, j| result.covariance[(kept[i], kept[j])]);
    let factor = match cov.clone().cholesky() {
        Some(c) => c.l(),
        None => {
            let eig = cov.symmetric_eigen();
            let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            eig.eigenvectors * DMatrix::from_diagonal(&root)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let z = DVector::from_fn(r, |_, _| StandardNormal.sample(&mut rng));
            let delta = &factor * z;
            let mut beta = result.beta.clone();
            for (i, &k) in kept.iter().enumerate() {
                beta[k] += delta[i];
            }
            beta
        })
        .collect()
}

/// Empirical `q`-quantile of `v` by linear interpolation between order statistics.
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// GEV quantile curves at each probability, with bands from `draws` posterior draws.
pub fn quantile_curves(
    result: &FitResult,
    newdata: &Table,
    probabilities: &[f64],
    level: f64,
    draws: usize,
    seed: u64,
) -> Result<Vec<QuantileCurve>, DesignError> {
    if result.family != Family::Gev {
        return Err(DesignError::Dimension(format!(
            "quantile curves need a gev fit, got {}",
            result.family
        )));
    }
    let rows = design_rows(result, newdata)?;
    let starts = block_starts(&rows);
    let n = newdata.nrows();
    let eta_at = |beta: &[f64]| -> Vec<Vec<f64>> {
        rows.iter()
            .zip(&starts)
            .map(|(r, &s)| linear_predictor(&r.x, &r.offset, &beta[s..s + r.x.ncols()], 0..n))
            .collect()
    };
    let point = eta_at(&result.beta);
    let sampled: Vec<Vec<Vec<f64>>> = posterior_draws(result, draws, seed).iter().map(|b| eta_at(b)).collect();
    let alpha = 0.5 * (1.0 - level);
    Ok(probabilities
        .iter()
        .map(|&p| {
            let estimate = (0..n)
                .map(|i| gev_quantile(&[point[0][i], point[1][i], point[2][i]], p))
                .collect();
            let (lower, upper) = (0..n)
                .map(|i| {
                    let mut qs: Vec<f64> = sampled
                        .iter()
                        .map(|e| gev_quantile(&[e[0][i], e[1][i], e[2][i]], p))
                        .collect();
                    qs.sort_by(f64::total_cmp);
                    if qs.is_empty() {
                        (f64::NAN, f64::NAN)
                    } else {
                        (empirical_quantile(&qs, alpha), empirical_quantile(&qs, 1.0 - alpha))
                    }
                })
                .unzip();
            QuantileCurve {
                probability: p,
                estimate,
                lower,
                upper,
            }
        })
        .collect())
}

/// Responses drawn independently at every row's fitted predictors, `[replicate][i]`.
///
/// Replicate `r` uses its own stream of `seed`, so output does not depend on
/// thread count.
pub fn simulate_from_fit(
    result: &FitResult,
    newdata: &Table,
    replicates: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, DesignError> {
    let eta = predict_eta(result, newdata)?;
    Ok(simulate_at(result.family, &eta, replicates, seed))
}

/// Responses drawn at given predictors `[d][i]`, `[replicate][i]`.
pub fn simulate_at(family: Family, eta: &[Vec<f64>], replicates: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = eta.first().map_or(0, Vec::len);
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut theta = vec![0.0; eta.len()];
            (0..n)
                .map(|i| {
                    for (t, e) in theta.iter_mut().zip(eta) {
                        *t = e[i];
                    }
                    family.sample(&theta, &mut rng)
                })
                .collect()
        })
        .collect()
}
