//! Penalized spline bases for one-dimensional smooth terms.
//!
//! Three kinds are supported:
//!
//! * cubic regression splines, parameterized by their values at evenly spaced
//!   knots with natural end conditions;
//! * cyclic cubic regression splines, the same construction with the ends of
//!   a declared period identified;
//! * order-2 thin-plate regression splines, built from an eigen-truncated
//!   radial basis on evenly spaced centers.
//!
//! Every penalty evaluates the integrated squared second derivative of the
//! represented function. Sum-to-zero identifiability constraints are absorbed
//! by a null-space transform `Z`, so a term's design columns always sum to zero
//! over the training data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::DesignError;

/// Eigenvalues above this fraction of the largest count towards the penalty rank.
pub const RANK_TOL: f64 = 1e-7;

/// Number of radial centers used by thin-plate terms (at least `k`).
pub const THIN_PLATE_CENTERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    CubicRegression,
    CyclicCubic,
    ThinPlate,
}

impl std::str::FromStr for BasisKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cubic-regression" | "cr" => Ok(BasisKind::CubicRegression),
            "cyclic-cubic" | "cc" => Ok(BasisKind::CyclicCubic),
            "thin-plate" | "tp" => Ok(BasisKind::ThinPlate),
            other => Err(format!("unknown basis kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub kind: BasisKind,
    /// Basis dimension before the identifiability constraint.
    pub k: usize,
    pub column: String,
    /// Period `[start, end)` for cyclic terms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<(f64, f64)>,
}

impl BasisSpec {
    pub fn new(kind: BasisKind, k: usize, column: impl Into<String>) -> Self {
        BasisSpec {
            kind,
            k,
            column: column.into(),
            period: None,
        }
    }

    pub fn cyclic(k: usize, column: impl Into<String>, period: (f64, f64)) -> Self {
        BasisSpec {
            kind: BasisKind::CyclicCubic,
            k,
            column: column.into(),
            period: Some(period),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum RawBasis {
    /// `gamma = f * beta` gives the second derivatives at the knots.
    Cubic {
        f: DMatrix<f64>,
    },
    Cyclic {
        f: DMatrix<f64>,
    },
    ThinPlate {
        transform: DMatrix<f64>,
    },
}

/// Everything needed to evaluate a fitted term's design row at new abscissae.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermBasis {
    pub spec: BasisSpec,
    /// Knots (cubic kinds, the cyclic list ends with the wrap point) or radial
    /// centers on the training range mapped to `[0, 1]` (thin plate).
    pub knots: Vec<f64>,
    /// Constraint transform `Z`, `k x k'`.
    pub constraint: DMatrix<f64>,
    raw: RawBasis,
    /// Training range of the predictor.
    pub range: (f64, f64),
}

/// One penalized smooth term evaluated on the training data.
#[derive(Debug, Clone)]
pub struct SmoothTermDesign {
    pub basis: TermBasis,
    /// `n x k'` design columns.
    pub matrix: DMatrix<f64>,
    /// `k' x k'` penalty.
    pub penalty: DMatrix<f64>,
    pub penalty_rank: usize,
}

fn data_range(x: &[f64]) -> Result<(f64, f64), DesignError> {
    if x.is_empty() {
        return Err(DesignError::InvalidBasis("empty predictor".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (row, &v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(DesignError::NonFinite {
                column: "predictor".into(),
                row,
            });
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return Err(DesignError::ConstantPredictor("predictor".into()));
    }
    Ok((lo, hi))
}

/// `count` evenly spaced points on `[lo, hi]`, both endpoints included exactly.
pub fn even_knots(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let step = (hi - lo) / (count - 1) as f64;
    let mut knots: Vec<f64> = (0..count).map(|i| lo + step * i as f64).collect();
    knots[count - 1] = hi;
    knots
}

/// Evenly spaced knots over the predictor range.
///
/// Cyclic terms get `k + 1` knots; the last one is identified with the first.
pub fn place_knots(x: &[f64], k: usize, kind: BasisKind) -> Result<Vec<f64>, DesignError> {
    let (lo, hi) = data_range(x)?;
    if k < 2 {
        return Err(DesignError::InvalidBasis(format!("need at least 2 knots, got {k}")));
    }
    Ok(match kind {
        BasisKind::CyclicCubic => even_knots(lo, hi, k + 1),
        _ => even_knots(lo, hi, k),
    })
}

/// Orthonormal basis of the complement of `span(c)`, from a Householder QR of `c`.
fn orthogonal_complement(c: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, m) = c.shape();
    let mut a = c.clone();
    let mut q = DMatrix::<f64>::identity(k, k);
    for col in 0..m {
        let len = k - col;
        let mut v = DVector::from_fn(len, |i, _| a[(col + i, col)]);
        let norm = v.norm();
        if norm == 0.0 {
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vtv = v.norm_squared();
        for j in col..m {
            let dot: f64 = (0..len).map(|i| v[i] * a[(col + i, j)]).sum();
            let f = 2.0 * dot / vtv;
            for i in 0..len {
                a[(col + i, j)] -= f * v[i];
            }
        }
        for r in 0..k {
            let dot: f64 = (0..len).map(|i| q[(r, col + i)] * v[i]).sum();
            let f = 2.0 * dot / vtv;
            for i in 0..len {
                q[(r, col + i)] -= f * v[i];
            }
        }
    }
    q.columns(m, k - m).into_owned()
}

/// Absorbs the sum-to-zero constraint `1' B Z = 0` into a raw basis and penalty.
///
/// Returns `(B Z, Z' S Z, Z)`. When the column sums already vanish the basis is
/// returned unchanged with `Z = I`.
pub fn absorb_constraint(b_raw: &DMatrix<f64>, s_raw: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let k = b_raw.ncols();
    let sums = DMatrix::from_fn(k, 1, |j, _| b_raw.column(j).sum());
    let scale = b_raw.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    let z = if sums.norm() <= 1e-14 * scale {
        DMatrix::identity(k, k)
    } else {
        orthogonal_complement(&sums)
    };
    let b = b_raw * &z;
    let s = symmetrize(&(z.transpose() * s_raw * &z));
    (b, s, z)
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Number of eigenvalues above `RANK_TOL` times the largest.
pub fn penalty_rank(s: &DMatrix<f64>) -> usize {
    if s.nrows() == 0 {
        return 0;
    }
    let eig = SymmetricEigen::new(symmetrize(s)).eigenvalues;
    let max = eig.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    eig.iter().filter(|&&e| e > RANK_TOL * max).count()
}

/// Natural cubic spline: `(f, S)` with `gamma = f beta` and `S = D' B^{-1} D`.
fn natural_cubic(knots: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>), DesignError> {
    let k = knots.len();
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let m = k - 2;
    let mut d = DMatrix::zeros(m, k);
    let mut b = DMatrix::zeros(m, m);
    for i in 0..m {
        d[(i, i)] = 1.0 / h[i];
        d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
        d[(i, i + 2)] = 1.0 / h[i + 1];
        b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
        if i + 1 < m {
            b[(i, i + 1)] = h[i + 1] / 6.0;
            b[(i + 1, i)] = h[i + 1] / 6.0;
        }
    }
    let chol = b
        .cholesky()
        .ok_or_else(|| DesignError::InvalidBasis("knot spacing not positive".into()))?;
    let interior = chol.solve(&d);
    let mut f = DMatrix::zeros(k, k);
    f.rows_mut(1, m).copy_from(&interior);
    let s = symmetrize(&(d.transpose() * interior));
    Ok((f, s))
}

/// Cyclic cubic spline on knots `t_0 < ... < t_J` with `t_J` identified with `t_0`.
fn cyclic_cubic(knots: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>), DesignError> {
    let j = knots.len() - 1;
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let mut d = DMatrix::zeros(j, j);
    let mut b = DMatrix::zeros(j, j);
    for i in 0..j {
        let prev = (i + j - 1) % j;
        let next = (i + 1) % j;
        let hp = h[prev];
        let hi = h[i];
        d[(i, prev)] += 1.0 / hp;
        d[(i, i)] += -1.0 / hp - 1.0 / hi;
        d[(i, next)] += 1.0 / hi;
        b[(i, prev)] += hp / 6.0;
        b[(i, i)] += (hp + hi) / 3.0;
        b[(i, next)] += hi / 6.0;
    }
    let chol = b
        .cholesky()
        .ok_or_else(|| DesignError::InvalidBasis("knot spacing not positive".into()))?;
    let f = chol.solve(&d);
    let s = symmetrize(&(d.transpose() * &f));
    Ok((f, s))
}

#[inline]
fn tps_kernel(r: f64) -> f64 {
    let a = r.abs();
    a * a * a / 12.0
}

/// Rank-`k` thin-plate basis: `(transform, S)` where the radial part of a row is
/// `eta(|x - centers|) * transform` followed by the columns `1, x`.
fn thin_plate(centers: &[f64], k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>), DesignError> {
    let m = centers.len();
    let e = DMatrix::from_fn(m, m, |i, j| tps_kernel(centers[i] - centers[j]));
    let eig = SymmetricEigen::new(e);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .partial_cmp(&eig.eigenvalues[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let keep = &order[..k];
    let u = DMatrix::from_fn(m, k, |i, c| eig.eigenvectors[(i, keep[c])]);
    let dvals = DVector::from_fn(k, |c, _| eig.eigenvalues[keep[c]]);
    let t = DMatrix::from_fn(m, 2, |i, c| if c == 0 { 1.0 } else { centers[i] });
    let constraint = u.transpose() * t;
    let zk = orthogonal_complement(&constraint);
    let transform = &u * &zk;
    let radial = zk.transpose() * DMatrix::from_diagonal(&dvals) * &zk;
    let mut s = DMatrix::zeros(k, k);
    s.view_mut((0, 0), (k - 2, k - 2)).copy_from(&symmetrize(&radial));
    Ok((transform, s))
}

impl TermBasis {
    /// Number of columns after the constraint.
    pub fn ncols(&self) -> usize {
        self.constraint.ncols()
    }

    /// Whether `x` lies outside the training range (never for cyclic terms).
    pub fn is_extrapolation(&self, x: f64) -> bool {
        match self.raw {
            RawBasis::Cyclic { .. } => false,
            _ => x < self.range.0 || x > self.range.1,
        }
    }

    fn interval(&self, x: f64) -> usize {
        let knots = &self.knots;
        let last = knots.len() - 2;
        match knots.binary_search_by(|k| k.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(last),
            Err(i) => i.saturating_sub(1).min(last),
        }
    }

    /// Row of the cubic piece on interval `j` (or its first/second derivative)
    /// evaluated at `x`, in raw coefficients.
    pub(crate) fn piece_row(&self, j: usize, x: f64, order: usize, out: &mut [f64]) {
        let (f, cyclic) = match &self.raw {
            RawBasis::Cubic { f } => (f, false),
            RawBasis::Cyclic { f } => (f, true),
            RawBasis::ThinPlate { .. } => unreachable!("piece_row on thin-plate basis"),
        };
        let k = out.len();
        let lo = j;
        let hi = if cyclic { (j + 1) % k } else { j + 1 };
        let h = self.knots[j + 1] - self.knots[j];
        let dm = self.knots[j + 1] - x;
        let dp = x - self.knots[j];
        let (am, ap, cm, cp) = match order {
            0 => (
                dm / h,
                dp / h,
                (dm * dm * dm / h - h * dm) / 6.0,
                (dp * dp * dp / h - h * dp) / 6.0,
            ),
            1 => (
                -1.0 / h,
                1.0 / h,
                (-3.0 * dm * dm / h + h) / 6.0,
                (3.0 * dp * dp / h - h) / 6.0,
            ),
            _ => (0.0, 0.0, dm / h, dp / h),
        };
        out.iter_mut().for_each(|v| *v = 0.0);
        out[lo] += am;
        out[hi] += ap;
        for c in 0..k {
            out[c] += cm * f[(lo, c)] + cp * f[(hi, c)];
        }
    }

    /// Unconstrained basis row at `x`.
    pub fn raw_row(&self, x: f64, out: &mut [f64]) {
        match &self.raw {
            RawBasis::Cubic { .. } => {
                let first = self.knots[0];
                let last = *self.knots.last().unwrap();
                if x < first || x > last {
                    // linear continuation beyond the boundary knots
                    let (j, edge) = if x < first {
                        (0, first)
                    } else {
                        (self.knots.len() - 2, last)
                    };
                    let mut slope = vec![0.0; out.len()];
                    self.piece_row(j, edge, 0, out);
                    self.piece_row(j, edge, 1, &mut slope);
                    let dx = x - edge;
                    for (o, s) in out.iter_mut().zip(&slope) {
                        *o += dx * s;
                    }
                } else {
                    let j = self.interval(x);
                    self.piece_row(j, x, 0, out);
                }
            }
            RawBasis::Cyclic { .. } => {
                let start = self.knots[0];
                let period = self.knots.last().unwrap() - start;
                let u = start + (x - start).rem_euclid(period);
                let j = self.interval(u);
                self.piece_row(j, u, 0, out);
            }
            RawBasis::ThinPlate { transform } => {
                let k = out.len();
                let radial = k - 2;
                let u = (x - self.range.0) / (self.range.1 - self.range.0);
                out.iter_mut().for_each(|v| *v = 0.0);
                for (m, &c) in self.knots.iter().enumerate() {
                    let e = tps_kernel(u - c);
                    for j in 0..radial {
                        out[j] += e * transform[(m, j)];
                    }
                }
                out[radial] = 1.0;
                out[radial + 1] = u;
            }
        }
    }

    /// Constrained design row at `x`; `out` has [`TermBasis::ncols`] entries.
    ///
    /// Training and prediction both go through this function, so identical
    /// inputs give bit-identical rows.
    pub fn row(&self, x: f64, out: &mut [f64]) {
        let k = self.spec.k;
        let mut raw = [0.0; 64];
        let mut heap;
        let raw: &mut [f64] = if k <= 64 {
            &mut raw[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        self.raw_row(x, raw);
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (r, v) in raw.iter().enumerate() {
                acc += v * self.constraint[(r, c)];
            }
            *o = acc;
        }
    }

    /// Raw penalty recomputed from the stored construction.
    fn raw_penalty(&self) -> Result<DMatrix<f64>, DesignError> {
        match self.spec.kind {
            BasisKind::CubicRegression => natural_cubic(&self.knots).map(|(_, s)| s),
            BasisKind::CyclicCubic => cyclic_cubic(&self.knots).map(|(_, s)| s),
            BasisKind::ThinPlate => thin_plate(&self.knots, self.spec.k).map(|(_, s)| s),
        }
    }
}

/// Builds the constrained design columns and penalty for one smooth term.
pub fn build_term(x: &[f64], spec: &BasisSpec) -> Result<SmoothTermDesign, DesignError> {
    let name = || spec.column.clone();
    let k = spec.k;
    if k < 4 {
        return Err(DesignError::InvalidBasis(format!(
            "term on `{}` needs k >= 4, got {k}",
            spec.column
        )));
    }
    let n = x.len();
    if n < k {
        return Err(DesignError::BasisExceedsData { k, n });
    }
    let range = data_range(x).map_err(|e| match e {
        DesignError::ConstantPredictor(_) => DesignError::ConstantPredictor(name()),
        DesignError::NonFinite { row, .. } => DesignError::NonFinite { column: name(), row },
        other => other,
    })?;
    let (knots, raw, s_raw) = match spec.kind {
        BasisKind::CubicRegression => {
            let knots = even_knots(range.0, range.1, k);
            let (f, s) = natural_cubic(&knots)?;
            (knots, RawBasis::Cubic { f }, s)
        }
        BasisKind::CyclicCubic => {
            let (a, b) = spec
                .period
                .ok_or_else(|| DesignError::InvalidBasis(format!("cyclic term on `{}` needs a period", spec.column)))?;
            if !(b > a) || range.0 < a || range.1 > b {
                return Err(DesignError::InvalidBasis(format!(
                    "period [{a}, {b}] does not cover the range of `{}`",
                    spec.column
                )));
            }
            let knots = even_knots(a, b, k + 1);
            let (f, s) = cyclic_cubic(&knots)?;
            (knots, RawBasis::Cyclic { f }, s)
        }
        BasisKind::ThinPlate => {
            // centers and abscissae live on the range mapped to [0, 1]
            let centers = even_knots(0.0, 1.0, THIN_PLATE_CENTERS.max(k));
            let (transform, s) = thin_plate(&centers, k)?;
            (centers, RawBasis::ThinPlate { transform }, s)
        }
    };
    let mut basis = TermBasis {
        spec: spec.clone(),
        knots,
        constraint: DMatrix::identity(k, k),
        raw,
        range,
    };
    let mut b_raw = DMatrix::zeros(n, k);
    let mut row = vec![0.0; k];
    for (i, &xi) in x.iter().enumerate() {
        basis.raw_row(xi, &mut row);
        for (j, v) in row.iter().enumerate() {
            b_raw[(i, j)] = *v;
        }
    }
    let (_, penalty, z) = absorb_constraint(&b_raw, &s_raw);
    basis.constraint = z;
    let kc = basis.ncols();
    let mut matrix = DMatrix::zeros(n, kc);
    let mut out = vec![0.0; kc];
    for (i, &xi) in x.iter().enumerate() {
        basis.row(xi, &mut out);
        for (j, v) in out.iter().enumerate() {
            matrix[(i, j)] = *v;
        }
    }
    let penalty_rank = penalty_rank(&penalty);
    Ok(SmoothTermDesign {
        basis,
        matrix,
        penalty,
        penalty_rank,
    })
}

impl SmoothTermDesign {
    /// Penalty before the constraint, `k x k`.
    pub fn raw_penalty(&self) -> DMatrix<f64> {
        self.basis.raw_penalty().expect("penalty of a constructed basis")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    /// Composite Simpson over each knot interval of `g`.
    fn simpson(knots: &[f64], mut g: impl FnMut(usize, f64) -> f64) -> f64 {
        let mut total = 0.0;
        for j in 0..knots.len() - 1 {
            let (a, b) = (knots[j], knots[j + 1]);
            let m = 8;
            let h = (b - a) / m as f64;
            let mut s = g(j, a) + g(j, b);
            for i in 1..m {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * g(j, a + h * i as f64);
            }
            total += s * h / 3.0;
        }
        total
    }

    #[test]
    fn knots_are_even_and_inclusive() {
        let x = [0.0, 0.3, 1.0];
        assert_eq!(
            place_knots(&x, 5, BasisKind::CubicRegression).unwrap(),
            vec![0.0, 0.25, 0.5, 0.75, 1.0]
        );
        let k10 = place_knots(&x, 10, BasisKind::CubicRegression).unwrap();
        assert_eq!(k10.len(), 10);
        for w in k10.windows(2) {
            assert!((w[1] - w[0] - 1.0 / 9.0).abs() < 1e-15);
        }
        assert_eq!(
            place_knots(&[2.0, 4.0, 3.3], 3, BasisKind::CubicRegression).unwrap(),
            vec![2.0, 3.0, 4.0]
        );
        let cyc = place_knots(&x, 4, BasisKind::CyclicCubic).unwrap();
        assert_eq!(cyc.len(), 5);
        assert_eq!(cyc[0], 0.0);
        assert_eq!(cyc[4], 1.0);
    }

    #[test]
    fn constant_predictor_is_rejected() {
        let err = place_knots(&[1.0, 1.0, 1.0], 4, BasisKind::CubicRegression).unwrap_err();
        assert!(matches!(err, DesignError::ConstantPredictor(_)));
        let spec = BasisSpec::new(BasisKind::CubicRegression, 4, "x");
        let err = build_term(&[2.0; 10], &spec).unwrap_err();
        assert_eq!(err, DesignError::ConstantPredictor("x".into()));
    }

    #[test]
    fn basis_exceeding_data_is_rejected() {
        let spec = BasisSpec::new(BasisKind::CubicRegression, 10, "x");
        let err = build_term(&uniform(9, 1), &spec).unwrap_err();
        assert_eq!(err, DesignError::BasisExceedsData { k: 10, n: 9 });
    }

    #[test]
    fn cubic_regression_dimensions_and_rank() {
        let x = uniform(200, 2);
        let t = build_term(&x, &BasisSpec::new(BasisKind::CubicRegression, 10, "x")).unwrap();
        assert_eq!(t.matrix.ncols(), 9);
        assert_eq!(t.penalty_rank, 8);
        assert_eq!(penalty_rank(&t.raw_penalty()), 8);
    }

    #[test]
    fn cyclic_dimensions_and_rank() {
        let x: Vec<f64> = uniform(300, 3).iter().map(|v| 12.0 * v).collect();
        let t = build_term(&x, &BasisSpec::cyclic(12, "month", (0.0, 12.0))).unwrap();
        assert_eq!(t.matrix.ncols(), 11);
        assert_eq!(t.penalty_rank, 11);
        assert_eq!(penalty_rank(&t.raw_penalty()), 11);
    }

    #[test]
    fn thin_plate_null_space_has_dimension_two() {
        let x = uniform(150, 4);
        let t = build_term(&x, &BasisSpec::new(BasisKind::ThinPlate, 10, "x")).unwrap();
        assert_eq!(t.raw_penalty().nrows(), 10);
        assert_eq!(penalty_rank(&t.raw_penalty()), 8);
        assert_eq!(t.matrix.ncols(), 9);
        assert_eq!(t.penalty_rank, 8);
    }

    #[test]
    fn cyclic_requires_covering_period() {
        let x = uniform(50, 5);
        let mut spec = BasisSpec::new(BasisKind::CyclicCubic, 6, "x");
        assert!(build_term(&x, &spec).is_err());
        spec.period = Some((0.2, 1.0));
        assert!(build_term(&x, &spec).is_err());
        spec.period = Some((0.0, 1.0));
        assert!(build_term(&x, &spec).is_ok());
    }

    #[test]
    fn penalty_annihilates_linear_functions() {
        let x = uniform(100, 6);
        let t = build_term(&x, &BasisSpec::new(BasisKind::CubicRegression, 10, "x")).unwrap();
        // raw coefficients of f(x) = 2 - 3x are its values at the knots
        let beta = DVector::from_iterator(10, t.basis.knots.iter().map(|k| 2.0 - 3.0 * k));
        let s = t.raw_penalty();
        assert!((beta.transpose() * &s * &beta)[(0, 0)].abs() < 1e-10);
        // and the best linear fit in the constrained basis, via least squares
        let y = DVector::from_iterator(100, x.iter().map(|v| 1.0 - 0.5 * v));
        let yc = &y - DVector::from_element(100, y.mean());
        let b = &t.matrix;
        let coef = (b.transpose() * b).cholesky().unwrap().solve(&(b.transpose() * &yc));
        assert!((coef.transpose() * &t.penalty * &coef)[(0, 0)].abs() < 1e-10);
    }

    #[test]
    fn penalty_equals_integrated_squared_second_derivative() {
        let x = uniform(80, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for spec in [
            BasisSpec::new(BasisKind::CubicRegression, 8, "x"),
            BasisSpec::cyclic(9, "x", (0.0, 1.0)),
        ] {
            let t = build_term(&x, &spec).unwrap();
            let k = spec.k;
            let beta: Vec<f64> = (0..k).map(|_| rng.random::<f64>() - 0.5).collect();
            let mut row = vec![0.0; k];
            let quad = simpson(&t.basis.knots, |j, u| {
                t.basis.piece_row(j, u, 2, &mut row);
                let f2: f64 = row.iter().zip(&beta).map(|(r, b)| r * b).sum();
                f2 * f2
            });
            let bv = DVector::from_vec(beta.clone());
            let pen = (bv.transpose() * t.raw_penalty() * &bv)[(0, 0)];
            assert!(((pen - quad) / quad).abs() < 1e-3, "{:?}: {pen} vs {quad}", spec.kind);
        }
    }

    #[test]
    fn thin_plate_penalty_equals_integrated_squared_second_derivative() {
        let x = uniform(120, 9);
        let t = build_term(&x, &BasisSpec::new(BasisKind::ThinPlate, 8, "x")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let beta: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
        // the penalty is defined on the range mapped to [0, 1]
        let (lo, hi) = t.basis.range;
        let f = |u: f64| {
            let mut row = vec![0.0; 8];
            t.basis.raw_row(lo + u * (hi - lo), &mut row);
            row.iter().zip(&beta).map(|(r, b)| r * b).sum::<f64>()
        };
        // f'' by central differences; f'' vanishes outside the centers
        let h = 1e-3;
        let grid = even_knots(0.0, 1.0, 2001);
        let quad = simpson(&grid, |_, u| {
            let d2 = (f(u + h) - 2.0 * f(u) + f(u - h)) / (h * h);
            d2 * d2
        });
        let bv = DVector::from_vec(beta);
        let pen = (bv.transpose() * t.raw_penalty() * &bv)[(0, 0)];
        assert!(((pen - quad) / quad).abs() < 1e-3, "{pen} vs {quad}");
    }

    #[test]
    fn cubic_spline_is_twice_continuously_differentiable() {
        let x = uniform(60, 11);
        let t = build_term(&x, &BasisSpec::new(BasisKind::CubicRegression, 7, "x")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let beta: Vec<f64> = (0..7).map(|_| rng.random::<f64>()).collect();
        let eval = |j: usize, u: f64, order: usize| {
            let mut row = vec![0.0; 7];
            t.basis.piece_row(j, u, order, &mut row);
            row.iter().zip(&beta).map(|(r, b)| r * b).sum::<f64>()
        };
        for j in 1..6 {
            let u = t.basis.knots[j];
            for order in 0..3 {
                assert!((eval(j - 1, u, order) - eval(j, u, order)).abs() < 1e-9);
            }
        }
        // natural end conditions
        assert!(eval(0, t.basis.knots[0], 2).abs() < 1e-12);
        assert!(eval(5, t.basis.knots[6], 2).abs() < 1e-12);
    }

    #[test]
    fn cyclic_spline_wraps_smoothly() {
        let x: Vec<f64> = uniform(90, 13).iter().map(|v| 12.0 * v).collect();
        let t = build_term(&x, &BasisSpec::cyclic(12, "m", (0.0, 12.0))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let beta: Vec<f64> = (0..12).map(|_| rng.random::<f64>() - 0.5).collect();
            let eval = |j: usize, u: f64, order: usize| {
                let mut row = vec![0.0; 12];
                t.basis.piece_row(j, u, order, &mut row);
                row.iter().zip(&beta).map(|(r, b)| r * b).sum::<f64>()
            };
            for order in 0..3 {
                let left = eval(11, 12.0, order);
                let right = eval(0, 0.0, order);
                assert!((left - right).abs() < 1e-8, "order {order}: {left} vs {right}");
            }
        }
    }

    #[test]
    fn constrained_columns_sum_to_zero() {
        for (seed, spec) in [
            (15, BasisSpec::new(BasisKind::CubicRegression, 10, "x")),
            (16, BasisSpec::cyclic(8, "x", (0.0, 1.0))),
            (17, BasisSpec::new(BasisKind::ThinPlate, 6, "x")),
        ] {
            let x = uniform(500, seed);
            let t = build_term(&x, &spec).unwrap();
            for j in 0..t.matrix.ncols() {
                assert!(t.matrix.column(j).sum().abs() < 1e-10 * 500.0);
            }
            let s = &t.penalty;
            assert_eq!(s, &s.transpose());
            let eig = SymmetricEigen::new(s.clone()).eigenvalues;
            let max = eig.max();
            assert!(eig.min() >= -1e-10 * max);
        }
    }

    #[test]
    fn absorb_constraint_on_random_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let b = DMatrix::from_fn(50, 6, |_, _| rng.random::<f64>());
        let s = DMatrix::identity(6, 6);
        let (bc, sc, z) = absorb_constraint(&b, &s);
        assert_eq!(bc.shape(), (50, 5));
        assert_eq!(sc.shape(), (5, 5));
        let sums = DMatrix::from_fn(1, 6, |_, j| b.column(j).sum());
        assert!((sums * &z).amax() < 1e-12);
        assert!((z.transpose() * &z - DMatrix::identity(5, 5)).amax() < 1e-14);
    }

    #[test]
    fn absorb_constraint_with_centred_columns_is_identity() {
        let b = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, -1.0, 2.0, 3.0, 0.5, -3.0, -0.5]);
        let (bc, _, z) = absorb_constraint(&b, &DMatrix::identity(2, 2));
        assert_eq!(z, DMatrix::identity(2, 2));
        assert_eq!(bc, b);
    }

    #[test]
    fn rank_is_invariant_to_predictor_scaling() {
        let x = uniform(100, 19);
        let spec = BasisSpec::new(BasisKind::CubicRegression, 9, "x");
        let r1 = build_term(&x, &spec).unwrap().penalty_rank;
        let scaled: Vec<f64> = x.iter().map(|v| 1000.0 * v - 7.0).collect();
        let r2 = build_term(&scaled, &spec).unwrap().penalty_rank;
        assert_eq!(r1, r2);
    }

    #[test]
    fn linear_extrapolation_outside_knots() {
        let x = uniform(40, 20);
        let t = build_term(&x, &BasisSpec::new(BasisKind::CubicRegression, 6, "x")).unwrap();
        let (lo, hi) = t.basis.range;
        let mut a = vec![0.0; 5];
        let mut b = vec![0.0; 5];
        let mut c = vec![0.0; 5];
        t.basis.row(hi + 0.1, &mut a);
        t.basis.row(hi + 0.2, &mut b);
        t.basis.row(hi + 0.3, &mut c);
        for j in 0..5 {
            assert!(((c[j] - b[j]) - (b[j] - a[j])).abs() < 1e-12);
        }
        assert!(t.basis.is_extrapolation(lo - 1e-9));
        assert!(!t.basis.is_extrapolation(lo));
    }
}
