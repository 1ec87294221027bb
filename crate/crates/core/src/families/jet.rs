//! Third-order Taylor jets in `N` variables.
//!
//! A [`Jet`] carries a value together with its full gradient, Hessian and
//! third-derivative tensor. Arithmetic propagates all of them exactly, so a
//! log-likelihood written once in jet arithmetic yields every derivative the
//! fitting code needs. Only the canonical entries (`a <= b <= c`) are computed;
//! the remaining ones are mirrored, which keeps the tensors exactly symmetric.

use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet<const N: usize> {
    pub v: f64,
    pub d1: [f64; N],
    pub d2: [[f64; N]; N],
    pub d3: [[[f64; N]; N]; N],
}

impl<const N: usize> Jet<N> {
    pub fn constant(v: f64) -> Self {
        Jet {
            v,
            d1: [0.0; N],
            d2: [[0.0; N]; N],
            d3: [[[0.0; N]; N]; N],
        }
    }

    /// The `i`-th independent variable evaluated at `v`.
    pub fn variable(i: usize, v: f64) -> Self {
        let mut j = Self::constant(v);
        j.d1[i] = 1.0;
        j
    }

    fn mirror(mut self) -> Self {
        for a in 0..N {
            for b in a..N {
                self.d2[b][a] = self.d2[a][b];
                for c in b..N {
                    let t = self.d3[a][b][c];
                    self.d3[a][c][b] = t;
                    self.d3[b][a][c] = t;
                    self.d3[b][c][a] = t;
                    self.d3[c][a][b] = t;
                    self.d3[c][b][a] = t;
                }
            }
        }
        self
    }

    /// Applies a univariate function given its value and first three derivatives at `self.v`.
    pub fn compose(&self, f0: f64, f1: f64, f2: f64, f3: f64) -> Self {
        let u = self;
        let mut out = Self::constant(f0);
        for a in 0..N {
            out.d1[a] = f1 * u.d1[a];
            for b in a..N {
                out.d2[a][b] = f2 * u.d1[a] * u.d1[b] + f1 * u.d2[a][b];
                for c in b..N {
                    out.d3[a][b][c] = f3 * u.d1[a] * u.d1[b] * u.d1[c]
                        + f2 * (u.d2[a][b] * u.d1[c] + u.d2[a][c] * u.d1[b] + u.d2[b][c] * u.d1[a])
                        + f1 * u.d3[a][b][c];
                }
            }
        }
        out.mirror()
    }

    pub fn scale(&self, k: f64) -> Self {
        let mut out = *self;
        out.v *= k;
        for a in 0..N {
            out.d1[a] *= k;
            for b in 0..N {
                out.d2[a][b] *= k;
                for c in 0..N {
                    out.d3[a][b][c] *= k;
                }
            }
        }
        out
    }

    pub fn add_const(&self, k: f64) -> Self {
        let mut out = *self;
        out.v += k;
        out
    }

    pub fn exp(&self) -> Self {
        let e = self.v.exp();
        self.compose(e, e, e, e)
    }

    pub fn ln(&self) -> Self {
        let x = self.v;
        let r = 1.0 / x;
        self.compose(x.ln(), r, -r * r, 2.0 * r * r * r)
    }

    pub fn recip(&self) -> Self {
        let r = 1.0 / self.v;
        self.compose(r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r)
    }

    pub fn powi(&self, n: i32) -> Self {
        let x = self.v;
        let nf = n as f64;
        self.compose(
            x.powi(n),
            nf * x.powi(n - 1),
            nf * (nf - 1.0) * x.powi(n - 2),
            nf * (nf - 1.0) * (nf - 2.0) * x.powi(n - 3),
        )
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut out = self;
        out.v += o.v;
        for a in 0..N {
            out.d1[a] += o.d1[a];
            for b in 0..N {
                out.d2[a][b] += o.d2[a][b];
                for c in 0..N {
                    out.d3[a][b][c] += o.d3[a][b][c];
                }
            }
        }
        out
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let (u, w) = (&self, &o);
        let mut out = Self::constant(u.v * w.v);
        for a in 0..N {
            out.d1[a] = u.d1[a] * w.v + u.v * w.d1[a];
            for b in a..N {
                out.d2[a][b] = u.d2[a][b] * w.v + u.d1[a] * w.d1[b] + u.d1[b] * w.d1[a] + u.v * w.d2[a][b];
                for c in b..N {
                    out.d3[a][b][c] = u.d3[a][b][c] * w.v
                        + u.d2[a][b] * w.d1[c]
                        + u.d2[a][c] * w.d1[b]
                        + u.d2[b][c] * w.d1[a]
                        + u.d1[a] * w.d2[b][c]
                        + u.d1[b] * w.d2[a][c]
                        + u.d1[c] * w.d2[a][b]
                        + u.v * w.d3[a][b][c];
                }
            }
        }
        out.mirror()
    }
}
