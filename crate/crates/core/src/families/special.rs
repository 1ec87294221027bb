//! Polygamma functions of order 0 to 2 for positive arguments.
//!
//! Small arguments are shifted upward with the recurrence relations until
//! `x >= 10`, then the asymptotic (Bernoulli) series is used.

const SHIFT_TO: f64 = 10.0;

pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT_TO {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    let series = r2 * (1.0 / 12.0 - r2 * (1.0 / 120.0 - r2 * (1.0 / 252.0 - r2 * (1.0 / 240.0 - r2 * (1.0 / 132.0)))));
    acc + x.ln() - 0.5 * r - series
}

pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT_TO {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    let series = r2 * r * (1.0 / 6.0 - r2 * (1.0 / 30.0 - r2 * (1.0 / 42.0 - r2 * (1.0 / 30.0 - r2 * (5.0 / 66.0)))));
    acc + r + 0.5 * r2 + series
}

pub fn tetragamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT_TO {
        acc -= 2.0 / (x * x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    let series = r2 * r2 * (0.5 - r2 * (1.0 / 6.0 - r2 * (1.0 / 6.0 - r2 * (3.0 / 10.0 - r2 * (5.0 / 6.0)))));
    acc - r2 - r2 * r - series
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

pub fn gamma(x: f64) -> f64 {
    statrs::function::gamma::gamma(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn known_values() {
        assert!((digamma(1.0) + EULER).abs() < 1e-13);
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0) - pi2_6).abs() < 1e-13);
        // psi''(1) = -2 zeta(3)
        assert!((tetragamma(1.0) + 2.0 * 1.202_056_903_159_594_3).abs() < 1e-12);
    }

    #[test]
    fn digamma_agrees_with_statrs() {
        for &x in &[0.05, 0.3, 1.7, 4.2, 9.99, 12.5, 250.0] {
            let ours = digamma(x);
            let theirs = statrs::function::gamma::digamma(x);
            assert!((ours - theirs).abs() < 1e-12 * (1.0 + theirs.abs()), "x = {x}");
        }
    }

    #[test]
    fn derivatives_are_consistent() {
        for &x in &[0.2, 1.3, 7.0, 40.0] {
            let h = 1e-5 * x;
            let fd1 = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((fd1 - trigamma(x)).abs() < 1e-7 * trigamma(x).abs());
            let fd2 = (trigamma(x + h) - trigamma(x - h)) / (2.0 * h);
            assert!((fd2 - tetragamma(x)).abs() < 1e-6 * tetragamma(x).abs());
        }
    }
}
