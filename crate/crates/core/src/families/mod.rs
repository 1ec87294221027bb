//! Response distributions with log-likelihood derivatives to third order in
//! the linear predictors.
//!
//! Linear-predictor conventions:
//!
//! | family      | D | predictors                                  |
//! |-------------|---|---------------------------------------------|
//! | gaussian    | 2 | mean, log-variance (sd = exp(eta2 / 2))     |
//! | poisson     | 1 | log-rate                                    |
//! | exponential | 1 | log-rate                                    |
//! | gamma       | 2 | log-shape, negative log-scale               |
//! | binomial    | 1 | logit of the success probability            |
//! | gev         | 3 | location, log-scale, shape                  |

pub mod gev;
pub mod jet;
pub mod scalar;
pub mod special;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Exp, Gamma, Normal, Open01, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::SupportError;
use jet::Jet;
use scalar::Scalar;

/// Maximum number of linear predictors of any family.
pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
    Exponential,
    Gamma,
    Binomial,
    Gev,
}

/// Log-likelihood of one observation with derivatives in its predictors.
///
/// Only the leading `dim` entries of each array are meaningful.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivBundle {
    pub dim: usize,
    pub loglik: f64,
    /// d l / d theta
    pub grad: [f64; MAX_DIM],
    /// -d^2 l / d theta d theta'
    pub neg_hess: [[f64; MAX_DIM]; MAX_DIM],
    /// d^3 l / d theta_a d theta_b d theta_c
    pub third: [[[f64; MAX_DIM]; MAX_DIM]; MAX_DIM],
}

impl DerivBundle {
    fn from_jet<const N: usize>(j: &Jet<N>) -> Self {
        let mut out = DerivBundle {
            dim: N,
            loglik: j.v,
            grad: [0.0; MAX_DIM],
            neg_hess: [[0.0; MAX_DIM]; MAX_DIM],
            third: [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM],
        };
        for a in 0..N {
            out.grad[a] = j.d1[a];
            for b in 0..N {
                out.neg_hess[a][b] = -j.d2[a][b];
                for c in 0..N {
                    out.third[a][b][c] = j.d3[a][b][c];
                }
            }
        }
        out
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Gaussian,
        Family::Poisson,
        Family::Exponential,
        Family::Gamma,
        Family::Binomial,
        Family::Gev,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Exponential => "exponential",
            Family::Gamma => "gamma",
            Family::Binomial => "binomial",
            Family::Gev => "gev",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Family::Poisson | Family::Exponential | Family::Binomial => 1,
            Family::Gaussian | Family::Gamma => 2,
            Family::Gev => 3,
        }
    }

    pub fn parameter_names(&self) -> &'static [&'static str] {
        match self {
            Family::Gaussian => &["mean", "log_variance"],
            Family::Poisson => &["log_rate"],
            Family::Exponential => &["log_rate"],
            Family::Gamma => &["log_shape", "neg_log_scale"],
            Family::Binomial => &["logit"],
            Family::Gev => &["location", "log_scale", "shape"],
        }
    }

    /// Names of the parameters on the response scale, matching [`Family::response_scale`].
    pub fn response_names(&self) -> &'static [&'static str] {
        match self {
            Family::Gaussian => &["mean", "sd"],
            Family::Poisson => &["rate"],
            Family::Exponential => &["rate"],
            Family::Gamma => &["shape", "scale"],
            Family::Binomial => &["probability"],
            Family::Gev => &["location", "scale", "shape"],
        }
    }

    /// Maps predictor `d` to its natural parameter. Every map is monotone.
    pub fn response_scale(&self, d: usize, eta: f64) -> f64 {
        match (self, d) {
            (Family::Gaussian, 0) => eta,
            (Family::Gaussian, _) => (0.5 * eta).exp(),
            (Family::Poisson, _) | (Family::Exponential, _) => eta.exp(),
            (Family::Gamma, 0) => eta.exp(),
            (Family::Gamma, _) => (-eta).exp(),
            (Family::Binomial, _) => scalar::logistic(eta),
            (Family::Gev, 1) => eta.exp(),
            (Family::Gev, _) => eta,
        }
    }

    /// Whether `y` is an admissible response for this family regardless of parameters.
    pub fn valid_response(&self, y: f64) -> bool {
        if !y.is_finite() {
            return false;
        }
        match self {
            Family::Gaussian | Family::Gev => true,
            Family::Poisson => y >= 0.0 && y.fract() == 0.0,
            Family::Exponential | Family::Gamma => y > 0.0,
            Family::Binomial => y == 0.0 || y == 1.0,
        }
    }

    fn eval<T: Scalar>(&self, y: f64, th: &[T]) -> Option<T> {
        match self {
            Family::Gaussian => {
                let r = T::cst(y) - th[0];
                let w = (-th[1]).exp();
                Some((th[1].scale(-0.5) - (r * r * w).scale(0.5)).add_const(-HALF_LN_2PI))
            }
            Family::Poisson => Some(th[0].scale(y) - th[0].exp() + T::cst(-special::ln_gamma(y + 1.0))),
            Family::Exponential => Some(th[0] - th[0].exp().scale(y)),
            Family::Gamma => {
                let shape = th[0].exp();
                let ly = y.ln();
                Some(-shape.ln_gamma() + shape * th[1] + shape.add_const(-1.0).scale(ly) - th[1].exp().scale(y))
            }
            Family::Binomial => Some(th[0].scale(y) - th[0].softplus()),
            Family::Gev => gev::loglik(y, th[0], th[1], th[2]),
        }
    }

    fn snap_shape(xi: f64) -> f64 {
        if gev::is_gumbel(xi) {
            0.0
        } else {
            xi
        }
    }

    /// Log-likelihood of a single observation.
    pub fn loglik(&self, y: f64, theta: &[f64]) -> Result<f64, SupportError> {
        let d = self.dim();
        self.eval(y, &theta[..d]).ok_or(SupportError { index: 0, y })
    }

    /// Log-likelihood with exact derivatives to third order.
    ///
    /// The GEV likelihood is evaluated at the given shape even inside the
    /// Gumbel band: its series form is exact there and stays consistent with
    /// its derivatives.
    pub fn loglik_derivs(&self, y: f64, theta: &[f64]) -> Result<DerivBundle, SupportError> {
        let err = SupportError { index: 0, y };
        match self.dim() {
            1 => {
                let th = [Jet::<1>::variable(0, theta[0])];
                self.eval(y, &th).map(|j| DerivBundle::from_jet(&j)).ok_or(err)
            }
            2 => {
                let th = [Jet::<2>::variable(0, theta[0]), Jet::<2>::variable(1, theta[1])];
                self.eval(y, &th).map(|j| DerivBundle::from_jet(&j)).ok_or(err)
            }
            _ => {
                let th = [
                    Jet::<3>::variable(0, theta[0]),
                    Jet::<3>::variable(1, theta[1]),
                    Jet::<3>::variable(2, theta[2]),
                ];
                self.eval(y, &th).map(|j| DerivBundle::from_jet(&j)).ok_or(err)
            }
        }
    }

    /// Draws one response at predictor values `theta`.
    pub fn sample<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> f64 {
        match self {
            Family::Gaussian => {
                let sd = (0.5 * theta[1]).exp();
                Normal::new(theta[0], sd).expect("finite sd").sample(rng)
            }
            Family::Poisson => {
                let rate = theta[0].exp();
                if rate <= 0.0 {
                    0.0
                } else {
                    Poisson::new(rate).expect("positive rate").sample(rng)
                }
            }
            Family::Exponential => Exp::new(theta[0].exp()).expect("positive rate").sample(rng),
            Family::Gamma => Gamma::new(theta[0].exp(), (-theta[1]).exp())
                .expect("positive shape and scale")
                .sample(rng),
            Family::Binomial => {
                let p = scalar::logistic(theta[0]);
                if Bernoulli::new(p).expect("probability in [0,1]").sample(rng) {
                    1.0
                } else {
                    0.0
                }
            }
            Family::Gev => {
                let u: f64 = Open01.sample(rng);
                gev::sample_from_uniform(theta[0], theta[1], Self::snap_shape(theta[2]), u)
            }
        }
    }

    /// Starting values for each predictor's intercept: moments, or quartiles for gev.
    pub fn initial_intercepts(&self, y: &[f64]) -> Vec<f64> {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).max(1e-8);
        match self {
            Family::Gaussian => vec![mean, var.ln()],
            Family::Poisson => vec![mean.max(1e-3).ln()],
            Family::Exponential => vec![-mean.max(1e-8).ln()],
            Family::Gamma => {
                let m = mean.max(1e-8);
                vec![(m * m / var).ln(), -(var / m).ln()]
            }
            Family::Binomial => {
                let p = mean.clamp(1e-3, 1.0 - 1e-3);
                vec![(p / (1.0 - p)).ln()]
            }
            Family::Gev => {
                // Gumbel quartile matching; moments are unstable under heavy tails
                if y.is_empty() {
                    return vec![0.0; 3];
                }
                let mut sorted = y.to_vec();
                sorted.sort_by(f64::total_cmp);
                let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
                let g = |p: f64| -(-p.ln()).ln();
                let sigma = ((q(0.75) - q(0.25)) / (g(0.75) - g(0.25))).max(1e-8);
                vec![q(0.5) - g(0.5) * sigma, sigma.ln(), 0.0]
            }
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "gauss" | "normal" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "exponential" | "exp" => Ok(Family::Exponential),
            "gamma" => Ok(Family::Gamma),
            "binomial" | "bernoulli" => Ok(Family::Binomial),
            "gev" => Ok(Family::Gev),
            other => Err(format!("unknown family `{other}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn poisson_example() {
        let b = Family::Poisson.loglik_derivs(2.0, &[0.0]).unwrap();
        assert!((b.loglik - (-1.0 - 2f64.ln())).abs() < 1e-14);
        assert!((b.grad[0] - 1.0).abs() < 1e-15);
        assert!((b.neg_hess[0][0] - 1.0).abs() < 1e-15);
        assert!((b.third[0][0][0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn gev_examples() {
        let f = Family::Gev;
        assert_eq!(f.loglik(0.0, &[0.0, 0.0, 0.0]).unwrap(), -1.0);
        assert!((f.loglik(1.0, &[0.0, 0.0, 0.5]).unwrap() + 1.660_839_768_768_937_6).abs() < 1e-12);
        assert!((f.loglik(2.0, &[0.0, 0.0, -0.2]).unwrap() + 2.121_062_495_063_962_7).abs() < 1e-12);
        let e = f.loglik(-3.0, &[0.0, 0.0, 0.5]).unwrap_err();
        assert_eq!(e.y, -3.0);
    }

    #[test]
    fn value_path_matches_jet_path() {
        let cases: [(Family, f64, &[f64]); 6] = [
            (Family::Gaussian, 1.3, &[0.4, -0.2]),
            (Family::Poisson, 3.0, &[0.7]),
            (Family::Exponential, 0.4, &[-0.3]),
            (Family::Gamma, 2.2, &[0.5, 0.1]),
            (Family::Binomial, 1.0, &[-0.8]),
            (Family::Gev, 0.9, &[0.1, -0.2, 0.15]),
        ];
        for (fam, y, th) in cases {
            let a = fam.loglik(y, th).unwrap();
            let b = fam.loglik_derivs(y, th).unwrap().loglik;
            assert!((a - b).abs() < 1e-14 * (1.0 + a.abs()), "{fam}");
        }
    }

    #[test]
    fn gev_gumbel_sample_at_inverse_e() {
        let y = gev::sample_from_uniform(2.5, 0.7, 0.0, (-1.0f64).exp());
        assert!((y - 2.5).abs() < 1e-15);
    }

    #[test]
    fn sample_means_follow_law_of_large_numbers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let tol = 3.0 / (n as f64).sqrt();
        let m: f64 = (0..n)
            .map(|_| Family::Gaussian.sample(&[3.0, 0.0], &mut rng))
            .sum::<f64>()
            / n as f64;
        assert!((m - 3.0).abs() < tol, "{m}");
        let m: f64 = (0..n).map(|_| Family::Poisson.sample(&[0.0], &mut rng)).sum::<f64>() / n as f64;
        assert!((m - 1.0).abs() < tol, "{m}");
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
    }
}
