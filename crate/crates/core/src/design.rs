//! Model specification, design assembly, and the per-observation reductions
//! that produce log-likelihood, score, Hessian and third-order trace terms.
//!
//! Each distribution parameter `d` has its own block `X^(d)`; the stacked
//! `nD x p` matrix is never formed. Reductions run over fixed-size row chunks
//! whose partial sums are combined in chunk order, so results do not depend
//! on the number of worker threads.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{self, BasisSpec, TermBasis};
use crate::error::{DesignError, SupportError};
use crate::families::{DerivBundle, Family, MAX_DIM};

/// Rows per reduction chunk.
pub const CHUNK: usize = 4096;

/// Named numeric columns of equal length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a column.
    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<(), DesignError> {
        let name = name.into();
        if let Some(first) = self.columns.first() {
            if first.len() != values.len() {
                return Err(DesignError::Dimension(format!(
                    "column `{name}` has {} rows, table has {}",
                    values.len(),
                    first.len()
                )));
            }
        }
        match self.names.iter().position(|n| *n == name) {
            Some(i) => self.columns[i] = values,
            None => {
                self.names.push(name);
                self.columns.push(values);
            }
        }
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.push(name, values).expect("column length");
        self
    }

    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    pub fn column(&self, name: &str) -> Result<&[f64], DesignError> {
        self.get(name)
            .ok_or_else(|| DesignError::MissingColumn(name.to_string()))
    }

    /// Column that must be finite everywhere.
    pub fn finite_column(&self, name: &str) -> Result<&[f64], DesignError> {
        let col = self.column(name)?;
        if let Some(row) = col.iter().position(|v| !v.is_finite()) {
            return Err(DesignError::NonFinite {
                column: name.to_string(),
                row,
            });
        }
        Ok(col)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Table {
        Table {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
        }
    }
}

/// Terms of one distribution parameter's linear predictor.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpec {
    #[serde(default = "default_true")]
    pub intercept: bool,
    /// Unpenalized columns entering linearly.
    #[serde(default)]
    pub linear: Vec<String>,
    #[serde(default)]
    pub smooths: Vec<BasisSpec>,
    /// Column added to the linear predictor with coefficient one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<String>,
}

fn default_true() -> bool {
    true
}

impl ParameterSpec {
    pub fn intercept_only() -> Self {
        ParameterSpec {
            intercept: true,
            ..Default::default()
        }
    }

    pub fn smooth(mut self, spec: BasisSpec) -> Self {
        self.smooths.push(spec);
        self
    }

    pub fn linear(mut self, column: impl Into<String>) -> Self {
        self.linear.push(column.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub response: String,
    pub parameters: Vec<ParameterSpec>,
}

/// Everything needed to rebuild one block's design rows from new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub intercept: bool,
    pub linear: Vec<String>,
    pub smooths: Vec<TermBasis>,
    pub offset: Option<String>,
}

/// Design rows for one block, evaluated on some table.
#[derive(Debug, Clone)]
pub struct BlockRows {
    pub x: DMatrix<f64>,
    pub offset: Vec<f64>,
    /// Rows where some smooth term is evaluated outside its training range.
    pub extrapolated: Vec<bool>,
}

impl BlockLayout {
    pub fn ncols(&self) -> usize {
        self.intercept as usize + self.linear.len() + self.smooths.iter().map(TermBasis::ncols).sum::<usize>()
    }

    /// Columns used by this block.
    pub fn columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.linear.iter().map(String::as_str).collect();
        out.extend(self.smooths.iter().map(|t| t.spec.column.as_str()));
        out.extend(self.offset.as_deref());
        out
    }

    pub fn rows(&self, table: &Table) -> Result<BlockRows, DesignError> {
        let n = table.nrows();
        let p = self.ncols();
        let mut x = DMatrix::zeros(n, p);
        let mut extrapolated = vec![false; n];
        let mut col = 0;
        if self.intercept {
            x.column_mut(0).fill(1.0);
            col = 1;
        }
        for name in &self.linear {
            let v = table.finite_column(name)?;
            for i in 0..n {
                x[(i, col)] = v[i];
            }
            col += 1;
        }
        for term in &self.smooths {
            let v = table.finite_column(&term.spec.column)?;
            let k = term.ncols();
            let mut row = vec![0.0; k];
            for i in 0..n {
                term.row(v[i], &mut row);
                for (j, r) in row.iter().enumerate() {
                    x[(i, col + j)] = *r;
                }
                extrapolated[i] |= term.is_extrapolation(v[i]);
            }
            col += k;
        }
        let offset = match &self.offset {
            Some(name) => table.finite_column(name)?.to_vec(),
            None => vec![0.0; n],
        };
        Ok(BlockRows {
            x,
            offset,
            extrapolated,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout {
    pub family: Family,
    pub response: String,
    pub blocks: Vec<BlockLayout>,
}

/// A penalty `S_j` on a contiguous coefficient range.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub label: String,
    /// Distribution parameter the term belongs to.
    pub parameter: usize,
    /// First global coefficient index.
    pub start: usize,
    pub matrix: DMatrix<f64>,
    pub rank: usize,
}

impl Penalty {
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len()
    }

    /// `beta_j' S_j beta_j`
    pub fn quadratic(&self, beta: &[f64]) -> f64 {
        let b = &beta[self.range()];
        let mut acc = 0.0;
        for (i, bi) in b.iter().enumerate() {
            let mut row = 0.0;
            for (k, bk) in b.iter().enumerate() {
                row += self.matrix[(i, k)] * bk;
            }
            acc += bi * row;
        }
        acc
    }
}

/// Log-likelihood with score and negative Hessian in the coefficients.
#[derive(Debug, Clone)]
pub struct Accumulated {
    pub loglik: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// An assembled multi-parameter design.
#[derive(Debug, Clone)]
pub struct ModelDesign {
    pub family: Family,
    pub y: Vec<f64>,
    /// `X^(d)`, `n x p_d`.
    pub blocks: Vec<DMatrix<f64>>,
    pub offsets: Vec<Vec<f64>>,
    /// Global index of each block's first coefficient.
    pub starts: Vec<usize>,
    pub penalties: Vec<Penalty>,
    pub coef_names: Vec<String>,
    /// Present for designs assembled from a [`ModelSpec`].
    pub layout: Option<DesignLayout>,
    /// Global index of each block's intercept column, when it has one.
    pub intercepts: Vec<Option<usize>>,
}

/// Raw penalty declaration for [`ModelDesign::from_blocks`].
#[derive(Debug, Clone)]
pub struct PenaltySpec {
    pub parameter: usize,
    /// First column within the parameter's block.
    pub column: usize,
    pub matrix: DMatrix<f64>,
}

impl ModelDesign {
    /// Builds the design for `spec` on `data`.
    pub fn assemble(spec: &ModelSpec, data: &Table) -> Result<ModelDesign, DesignError> {
        let family = spec.family;
        let dim = family.dim();
        if spec.parameters.len() != dim {
            return Err(DesignError::BlockCount {
                family: family.name(),
                expected: dim,
                found: spec.parameters.len(),
            });
        }
        let y = data.finite_column(&spec.response)?.to_vec();
        if y.is_empty() {
            return Err(DesignError::Dimension("no observations".into()));
        }
        if let Some(row) = y.iter().position(|&v| !family.valid_response(v)) {
            return Err(DesignError::InvalidResponse { row, y: y[row] });
        }
        let names = family.parameter_names();
        let mut layouts = Vec::with_capacity(dim);
        let mut term_penalties = Vec::new();
        for (d, ps) in spec.parameters.iter().enumerate() {
            for name in &ps.linear {
                data.finite_column(name)?;
            }
            let mut smooths = Vec::with_capacity(ps.smooths.len());
            let mut col = ps.intercept as usize + ps.linear.len();
            for bs in &ps.smooths {
                let x = data.finite_column(&bs.column)?;
                let term = basis::build_term(x, bs)?;
                term_penalties.push((
                    d,
                    col,
                    format!("{}:s({})", names[d], bs.column),
                    term.penalty.clone(),
                    term.penalty_rank,
                ));
                col += term.basis.ncols();
                smooths.push(term.basis);
            }
            layouts.push(BlockLayout {
                intercept: ps.intercept,
                linear: ps.linear.clone(),
                smooths,
                offset: ps.offset.clone(),
            });
        }
        let mut blocks = Vec::with_capacity(dim);
        let mut offsets = Vec::with_capacity(dim);
        for layout in &layouts {
            let rows = layout.rows(data)?;
            blocks.push(rows.x);
            offsets.push(rows.offset);
        }
        let mut coef_names = Vec::new();
        for (d, layout) in layouts.iter().enumerate() {
            if layout.intercept {
                coef_names.push(format!("{}:(Intercept)", names[d]));
            }
            for c in &layout.linear {
                coef_names.push(format!("{}:{c}", names[d]));
            }
            for t in &layout.smooths {
                for k in 0..t.ncols() {
                    coef_names.push(format!("{}:s({}).{}", names[d], t.spec.column, k + 1));
                }
            }
        }
        let mut design = Self::from_parts(family, y, blocks, offsets, Vec::new(), coef_names)?;
        design.penalties = term_penalties
            .into_iter()
            .map(|(d, col, label, matrix, rank)| Penalty {
                label,
                parameter: d,
                start: design.starts[d] + col,
                matrix,
                rank,
            })
            .collect();
        design.intercepts = layouts
            .iter()
            .enumerate()
            .map(|(d, l)| l.intercept.then_some(design.starts[d]))
            .collect();
        design.layout = Some(DesignLayout {
            family,
            response: spec.response.clone(),
            blocks: layouts,
        });
        Ok(design)
    }

    /// Builds a design from explicit blocks, for models outside the spline grammar.
    ///
    /// Penalty ranks are computed from the supplied matrices. No block is
    /// assumed to have an intercept.
    pub fn from_blocks(
        family: Family,
        y: Vec<f64>,
        blocks: Vec<DMatrix<f64>>,
        penalties: Vec<PenaltySpec>,
    ) -> Result<ModelDesign, DesignError> {
        let n = y.len();
        let offsets = vec![vec![0.0; n]; blocks.len()];
        let p: usize = blocks.iter().map(|b| b.ncols()).sum();
        let names = (0..p).map(|i| format!("b{i}")).collect();
        let mut design = Self::from_parts(family, y, blocks, offsets, Vec::new(), names)?;
        for (j, ps) in penalties.into_iter().enumerate() {
            let len = ps.matrix.nrows();
            if ps.parameter >= design.blocks.len()
                || ps.matrix.ncols() != len
                || ps.column + len > design.blocks[ps.parameter].ncols()
            {
                return Err(DesignError::Dimension(format!("penalty {j} does not fit its block")));
            }
            let matrix = basis::symmetrize(&ps.matrix);
            let rank = basis::penalty_rank(&matrix);
            design.penalties.push(Penalty {
                label: format!("S{}", j + 1),
                parameter: ps.parameter,
                start: design.starts[ps.parameter] + ps.column,
                matrix,
                rank,
            });
        }
        let mut sorted: Vec<Range<usize>> = design.penalties.iter().map(Penalty::range).collect();
        sorted.sort_by_key(|r| r.start);
        if sorted.windows(2).any(|w| w[0].end > w[1].start) {
            return Err(DesignError::Dimension("penalties overlap".into()));
        }
        Ok(design)
    }

    fn from_parts(
        family: Family,
        y: Vec<f64>,
        blocks: Vec<DMatrix<f64>>,
        offsets: Vec<Vec<f64>>,
        penalties: Vec<Penalty>,
        coef_names: Vec<String>,
    ) -> Result<ModelDesign, DesignError> {
        let n = y.len();
        if blocks.len() != family.dim() {
            return Err(DesignError::BlockCount {
                family: family.name(),
                expected: family.dim(),
                found: blocks.len(),
            });
        }
        if blocks.iter().any(|b| b.nrows() != n) || offsets.iter().any(|o| o.len() != n) {
            return Err(DesignError::Dimension("block rows differ from response length".into()));
        }
        let mut starts = Vec::with_capacity(blocks.len());
        let mut p = 0;
        for b in &blocks {
            starts.push(p);
            p += b.ncols();
        }
        let dim = blocks.len();
        Ok(ModelDesign {
            family,
            y,
            blocks,
            offsets,
            starts,
            penalties,
            coef_names,
            layout: None,
            intercepts: vec![None; dim],
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.blocks.iter().map(|b| b.ncols()).sum()
    }

    pub fn q(&self) -> usize {
        self.penalties.len()
    }

    pub fn dim(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_range(&self, d: usize) -> Range<usize> {
        self.starts[d]..self.starts[d] + self.blocks[d].ncols()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.penalties.iter().map(|s| s.rank).collect()
    }

    /// Dimension of the null space of `S_lambda`.
    pub fn null_space_dim(&self) -> usize {
        self.p() - self.penalties.iter().map(|s| s.rank).sum::<usize>()
    }

    /// Dense `S_lambda`.
    pub fn penalty_matrix(&self, lambda: &[f64]) -> DMatrix<f64> {
        let p = self.p();
        let mut s = DMatrix::zeros(p, p);
        for (pen, &l) in self.penalties.iter().zip(lambda) {
            let r = pen.start;
            let mut view = s.view_mut((r, r), (pen.len(), pen.len()));
            view += &pen.matrix * l;
        }
        s
    }

    /// `S_lambda beta`
    pub fn penalty_times(&self, lambda: &[f64], beta: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.p());
        for (pen, &l) in self.penalties.iter().zip(lambda) {
            let b = DVector::from_column_slice(&beta[pen.range()]);
            let sb = &pen.matrix * b * l;
            out.rows_mut(pen.start, pen.len()).copy_from(&sb);
        }
        out
    }

    /// `beta' S_lambda beta = sum_j lambda_j beta_j' S_j beta_j`
    pub fn penalty_quadratic(&self, lambda: &[f64], beta: &[f64]) -> f64 {
        self.penalties
            .iter()
            .zip(lambda)
            .map(|(pen, l)| l * pen.quadratic(beta))
            .sum()
    }

    /// Starting coefficients: zeros except intercepts, which take moment
    /// estimates from the response.
    pub fn initial_beta(&self) -> Vec<f64> {
        let mut beta = vec![0.0; self.p()];
        let init = self.family.initial_intercepts(&self.y);
        for (d, idx) in self.intercepts.iter().enumerate() {
            if let Some(i) = idx {
                let mean_offset = self.offsets[d].iter().sum::<f64>() / self.n().max(1) as f64;
                beta[*i] = init[d] - mean_offset;
            }
        }
        beta
    }

    fn chunks(&self) -> Vec<Range<usize>> {
        let n = self.n();
        (0..n.div_ceil(CHUNK))
            .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
            .collect()
    }

    /// Linear predictors of block `d` for the given rows.
    pub fn linear_predictor(&self, d: usize, beta: &[f64], rows: Range<usize>) -> Vec<f64> {
        let b = &beta[self.block_range(d)];
        linear_predictor(&self.blocks[d], &self.offsets[d], b, rows)
    }

    /// `theta^(d)` for every observation and parameter, `[d][i]`.
    pub fn predictors(&self, beta: &[f64]) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|d| self.linear_predictor(d, beta, 0..self.n()))
            .collect()
    }

    fn chunk_thetas(&self, beta: &[f64], rows: Range<usize>) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|d| self.linear_predictor(d, beta, rows.clone()))
            .collect()
    }

    fn chunk_derivs(&self, beta: &[f64], rows: Range<usize>) -> Result<Vec<DerivBundle>, SupportError> {
        let thetas = self.chunk_thetas(beta, rows.clone());
        let dim = self.dim();
        let mut th = [0.0; MAX_DIM];
        rows.enumerate()
            .map(|(local, i)| {
                for d in 0..dim {
                    th[d] = thetas[d][local];
                }
                self.family
                    .loglik_derivs(self.y[i], &th[..dim])
                    .map_err(|e| SupportError { index: i, ..e })
            })
            .collect()
    }

    /// Log-likelihood only.
    pub fn loglik(&self, beta: &[f64]) -> Result<f64, SupportError> {
        let dim = self.dim();
        let parts: Vec<Result<f64, SupportError>> = self
            .chunks()
            .into_par_iter()
            .map(|rows| {
                let thetas = self.chunk_thetas(beta, rows.clone());
                let mut th = [0.0; MAX_DIM];
                let mut acc = 0.0;
                for (local, i) in rows.enumerate() {
                    for d in 0..dim {
                        th[d] = thetas[d][local];
                    }
                    acc += self
                        .family
                        .loglik(self.y[i], &th[..dim])
                        .map_err(|e| SupportError { index: i, ..e })?;
                }
                Ok(acc)
            })
            .collect();
        let mut total = 0.0;
        for p in parts {
            total += p?;
        }
        Ok(total)
    }

    /// `l_L`, `U(beta)` and `H(beta)`; `H` is exactly symmetric.
    pub fn accumulate(&self, beta: &[f64]) -> Result<Accumulated, SupportError> {
        let dim = self.dim();
        let parts: Vec<Result<(f64, Vec<DVector<f64>>, BTreeMap<(usize, usize), DMatrix<f64>>), SupportError>> = self
            .chunks()
            .into_par_iter()
            .map(|rows| {
                let derivs = self.chunk_derivs(beta, rows.clone())?;
                let len = rows.len();
                let ll: f64 = derivs.iter().map(|b| b.loglik).sum();
                let mut grads = Vec::with_capacity(dim);
                let mut hess = BTreeMap::new();
                for a in 0..dim {
                    let xa = self.blocks[a].rows(rows.start, len);
                    let u = DVector::from_iterator(len, derivs.iter().map(|b| b.grad[a]));
                    grads.push(xa.tr_mul(&u));
                    for b in a..dim {
                        let xb = self.blocks[b].rows(rows.start, len);
                        let mut w = xb.clone_owned();
                        for mut col in w.column_iter_mut() {
                            for (v, bundle) in col.iter_mut().zip(&derivs) {
                                *v *= bundle.neg_hess[a][b];
                            }
                        }
                        hess.insert((a, b), xa.tr_mul(&w));
                    }
                }
                Ok((ll, grads, hess))
            })
            .collect();
        let p = self.p();
        let mut loglik = 0.0;
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for part in parts {
            let (ll, g, h) = part?;
            loglik += ll;
            for (a, ga) in g.iter().enumerate() {
                let mut view = grad.rows_mut(self.starts[a], ga.len());
                view += ga;
            }
            for ((a, b), hab) in h {
                let mut view = hess.view_mut((self.starts[a], self.starts[b]), hab.shape());
                view += &hab;
            }
        }
        for a in 0..dim {
            for b in a + 1..dim {
                let (ra, rb) = (self.block_range(a), self.block_range(b));
                for i in ra.clone() {
                    for j in rb.clone() {
                        hess[(j, i)] = hess[(i, j)];
                    }
                }
            }
        }
        Ok(Accumulated {
            loglik,
            grad,
            hess: basis::symmetrize(&hess),
        })
    }

    /// Directional derivative of `H(beta)` along `v`:
    /// `sum_i X_i' [sum_c T_i[.,.,c] (X_i v)_c] X_i` with `T_i` the third
    /// derivatives of `-l_i`.
    pub fn hessian_lambda_derivative(&self, beta: &[f64], v: &[f64]) -> Result<DMatrix<f64>, SupportError> {
        let dim = self.dim();
        let p = self.p();
        let parts: Vec<Result<DMatrix<f64>, SupportError>> = self
            .chunks()
            .into_par_iter()
            .map(|rows| {
                let derivs = self.chunk_derivs(beta, rows.clone())?;
                let len = rows.len();
                let dtheta: Vec<Vec<f64>> = (0..dim)
                    .map(|c| {
                        let vb = &v[self.block_range(c)];
                        let x = &self.blocks[c];
                        rows.clone()
                            .map(|i| (0..vb.len()).map(|j| x[(i, j)] * vb[j]).sum())
                            .collect()
                    })
                    .collect();
                let mut out = DMatrix::zeros(p, p);
                for a in 0..dim {
                    let xa = self.blocks[a].rows(rows.start, len);
                    for b in a..dim {
                        let xb = self.blocks[b].rows(rows.start, len);
                        let mut w = xb.clone_owned();
                        for mut col in w.column_iter_mut() {
                            for (k, val) in col.iter_mut().enumerate() {
                                let t = &derivs[k].third[a][b];
                                let m: f64 = (0..dim).map(|c| -t[c] * dtheta[c][k]).sum();
                                *val *= m;
                            }
                        }
                        let block = xa.tr_mul(&w);
                        let mut view = out.view_mut((self.starts[a], self.starts[b]), block.shape());
                        view += &block;
                        if b != a {
                            let mut view =
                                out.view_mut((self.starts[b], self.starts[a]), (block.ncols(), block.nrows()));
                            view += &block.transpose();
                        }
                    }
                }
                Ok(out)
            })
            .collect();
        let mut total = DMatrix::zeros(p, p);
        for part in parts {
            total += part?;
        }
        Ok(basis::symmetrize(&total))
    }

    /// Vector `g` with `Tr(A dH(v)) = g . v` for every direction `v`, where
    /// `dH(v)` is [`ModelDesign::hessian_lambda_derivative`] and `A` is symmetric.
    ///
    /// Costs one pass over the data, independent of the number of directions.
    pub fn third_order_trace_gradient(&self, beta: &[f64], a_mat: &DMatrix<f64>) -> Result<DVector<f64>, SupportError> {
        let dim = self.dim();
        let p = self.p();
        let parts: Vec<Result<DVector<f64>, SupportError>> = self
            .chunks()
            .into_par_iter()
            .map(|rows| {
                let derivs = self.chunk_derivs(beta, rows.clone())?;
                let len = rows.len();
                // w[a][b][i] = x_ia' A_ab x_ib
                let mut w: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); dim]; dim];
                for a in 0..dim {
                    let xa = self.blocks[a].rows(rows.start, len);
                    for b in a..dim {
                        let xb = self.blocks[b].rows(rows.start, len);
                        let aab = a_mat.view((self.starts[a], self.starts[b]), (xa.ncols(), xb.ncols()));
                        let pa = &xa * aab;
                        w[a][b] = (0..len)
                            .map(|i| pa.row(i).iter().zip(xb.row(i).iter()).map(|(x, y)| x * y).sum::<f64>())
                            .collect();
                    }
                }
                let mut g = DVector::zeros(p);
                for c in 0..dim {
                    let z = DVector::from_fn(len, |i, _| {
                        let t = &derivs[i].third;
                        let mut acc = 0.0;
                        for a in 0..dim {
                            acc -= t[a][a][c] * w[a][a][i];
                            for b in a + 1..dim {
                                acc -= 2.0 * t[a][b][c] * w[a][b][i];
                            }
                        }
                        acc
                    });
                    let xc = self.blocks[c].rows(rows.start, len);
                    let gc = xc.tr_mul(&z);
                    let mut view = g.rows_mut(self.starts[c], gc.len());
                    view += &gc;
                }
                Ok(g)
            })
            .collect();
        let mut total = DVector::zeros(p);
        for part in parts {
            total += part?;
        }
        Ok(total)
    }

    /// The design restricted to the coefficients in `kept` (sorted ascending).
    ///
    /// Every penalty is retained, reduced to its kept rows and columns, with
    /// its rank recomputed.
    pub fn restrict(&self, kept: &[usize]) -> ModelDesign {
        let mut blocks = Vec::with_capacity(self.dim());
        let mut new_index = vec![None; self.p()];
        let mut next = 0;
        let mut starts = Vec::with_capacity(self.dim());
        for d in 0..self.dim() {
            starts.push(next);
            let range = self.block_range(d);
            let cols: Vec<usize> = kept
                .iter()
                .filter(|&&k| range.contains(&k))
                .map(|&k| k - range.start)
                .collect();
            for &c in &cols {
                new_index[range.start + c] = Some(next);
                next += 1;
            }
            blocks.push(self.blocks[d].select_columns(cols.iter()));
        }
        let penalties = self
            .penalties
            .iter()
            .map(|pen| {
                let local: Vec<usize> = pen
                    .range()
                    .filter(|g| new_index[*g].is_some())
                    .map(|g| g - pen.start)
                    .collect();
                let matrix = pen.matrix.select_rows(local.iter()).select_columns(local.iter());
                let start = local
                    .first()
                    .and_then(|&l| new_index[pen.start + l])
                    .unwrap_or_else(|| starts[pen.parameter]);
                let rank = if pen.rank == 0 || local.len() == pen.len() {
                    pen.rank
                } else {
                    basis::penalty_rank(&matrix)
                };
                Penalty {
                    label: pen.label.clone(),
                    parameter: pen.parameter,
                    start,
                    matrix,
                    rank,
                }
            })
            .collect();
        ModelDesign {
            family: self.family,
            y: self.y.clone(),
            blocks,
            offsets: self.offsets.clone(),
            starts,
            penalties,
            coef_names: kept.iter().map(|&k| self.coef_names[k].clone()).collect(),
            layout: self.layout.clone(),
            intercepts: self.intercepts.iter().map(|i| i.and_then(|i| new_index[i])).collect(),
        }
    }

    /// The same design on a subset of observations.
    pub fn select_rows(&self, rows: &[usize]) -> ModelDesign {
        ModelDesign {
            y: rows.iter().map(|&r| self.y[r]).collect(),
            blocks: self.blocks.iter().map(|b| b.select_rows(rows.iter())).collect(),
            offsets: self
                .offsets
                .iter()
                .map(|o| rows.iter().map(|&r| o[r]).collect())
                .collect(),
            ..self.clone()
        }
    }
}

/// `eta_i = offset_i + sum_j x_ij b_j`, summed left to right over `j`.
///
/// Fitting and prediction both use this, so equal rows give equal bits.
pub fn linear_predictor(x: &DMatrix<f64>, offset: &[f64], b: &[f64], rows: Range<usize>) -> Vec<f64> {
    rows.map(|i| {
        let mut eta = offset[i];
        for (j, bj) in b.iter().enumerate() {
            eta += x[(i, j)] * bj;
        }
        eta
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn known_variance(x: DMatrix<f64>, y: Vec<f64>, penalties: Vec<PenaltySpec>) -> ModelDesign {
        let n = y.len();
        ModelDesign::from_blocks(Family::Gaussian, y, vec![x, DMatrix::zeros(n, 0)], penalties).unwrap()
    }

    fn uniform_table(n: usize, cols: &[&str], seed: u64) -> Table {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Table::new();
        for c in cols {
            t.push(*c, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
        }
        t
    }

    fn random_poisson_design(seed: u64) -> (ModelDesign, Vec<f64>) {
        let mut t = uniform_table(120, &["x1", "x2"], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let y: Vec<f64> = (0..120).map(|_| rng.random_range(0..5) as f64).collect();
        t.push("y", y).unwrap();
        let spec = ModelSpec {
            family: Family::Poisson,
            response: "y".into(),
            parameters: vec![ParameterSpec::intercept_only()
                .smooth(BasisSpec::new(BasisKind::CubicRegression, 5, "x1"))
                .linear("x2")],
        };
        let d = ModelDesign::assemble(&spec, &t).unwrap();
        let beta: Vec<f64> = (0..d.p()).map(|_| 0.3 * (rng.random::<f64>() - 0.5)).collect();
        (d, beta)
    }

    fn random_gev_design(seed: u64) -> (ModelDesign, Vec<f64>) {
        let mut t = uniform_table(90, &["x"], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let y: Vec<f64> = (0..90).map(|_| rng.random::<f64>() * 0.5).collect();
        t.push("y", y).unwrap();
        let smooth = || ParameterSpec::intercept_only().smooth(BasisSpec::new(BasisKind::CubicRegression, 4, "x"));
        let spec = ModelSpec {
            family: Family::Gev,
            response: "y".into(),
            parameters: vec![smooth(), smooth(), smooth()],
        };
        let d = ModelDesign::assemble(&spec, &t).unwrap();
        let mut beta = vec![0.0; d.p()];
        for (k, b) in beta.iter_mut().enumerate() {
            *b = 0.05 * ((k as f64 * 1.7).sin());
        }
        beta[d.starts[2]] = 0.1;
        (d, beta)
    }

    #[test]
    fn intercept_model_score_and_hessian() {
        let d = known_variance(DMatrix::from_element(3, 1, 1.0), vec![1.0, 2.0, 3.0], vec![]);
        let acc = d.accumulate(&[0.0]).unwrap();
        assert_eq!(acc.grad[0], 6.0);
        assert_eq!(acc.hess[(0, 0)], 3.0);
        assert_eq!(d.p(), 1);
        assert_eq!(d.q(), 0);
    }

    #[test]
    fn gaussian_simulation_layout() {
        let mut t = uniform_table(400, &["x1", "x2", "x3", "x4", "x5", "x6"], 1);
        t.push("y", vec![0.5; 400]).unwrap();
        let block = |cols: &[&str]| {
            let mut p = ParameterSpec::intercept_only();
            for c in cols {
                p = p.smooth(BasisSpec::new(BasisKind::CubicRegression, 10, *c));
            }
            p
        };
        let spec = ModelSpec {
            family: Family::Gaussian,
            response: "y".into(),
            parameters: vec![block(&["x1", "x2", "x3"]), block(&["x4", "x5", "x6"])],
        };
        let d = ModelDesign::assemble(&spec, &t).unwrap();
        assert_eq!(d.p(), 56);
        assert_eq!(d.q(), 6);
        assert_eq!(d.null_space_dim(), 56 - 6 * 8);
        assert_eq!(d.intercepts, vec![Some(0), Some(28)]);
    }

    #[test]
    fn gev_application_layout() {
        let mut t = uniform_table(300, &["year"], 2);
        let month: Vec<f64> = (0..300).map(|i| (i % 12) as f64 + 0.5).collect();
        t.push("month", month).unwrap();
        t.push("y", vec![1.0; 300]).unwrap();
        let cyc = || BasisSpec::cyclic(12, "month", (0.0, 12.0));
        let spec = ModelSpec {
            family: Family::Gev,
            response: "y".into(),
            parameters: vec![
                ParameterSpec::intercept_only()
                    .smooth(cyc())
                    .smooth(BasisSpec::new(BasisKind::ThinPlate, 10, "year")),
                ParameterSpec::intercept_only().smooth(cyc()),
                ParameterSpec::intercept_only().smooth(cyc()),
            ],
        };
        let d = ModelDesign::assemble(&spec, &t).unwrap();
        assert_eq!(d.q(), 4);
        assert_eq!(d.p(), 3 * 12 + 9);
    }

    #[test]
    fn missing_and_non_finite_columns() {
        let t = uniform_table(30, &["x"], 3).with("y", vec![1.0; 30]);
        let mut spec = ModelSpec {
            family: Family::Poisson,
            response: "y".into(),
            parameters: vec![ParameterSpec::intercept_only().linear("z")],
        };
        assert_eq!(
            ModelDesign::assemble(&spec, &t).unwrap_err(),
            DesignError::MissingColumn("z".into())
        );
        let mut x = vec![0.5; 30];
        x[4] = f64::NAN;
        let t = t.with("z", x);
        assert_eq!(
            ModelDesign::assemble(&spec, &t).unwrap_err(),
            DesignError::NonFinite {
                column: "z".into(),
                row: 4
            }
        );
        spec.parameters.push(ParameterSpec::intercept_only());
        assert!(matches!(
            ModelDesign::assemble(&spec, &t).unwrap_err(),
            DesignError::BlockCount {
                expected: 1,
                found: 2,
                ..
            }
        ));
    }

    #[test]
    fn score_matches_finite_differences() {
        for (d, beta) in [random_poisson_design(4), random_gev_design(5)] {
            let acc = d.accumulate(&beta).unwrap();
            let h = 1e-6;
            for k in 0..d.p() {
                let mut bp = beta.clone();
                bp[k] += h;
                let mut bm = beta.clone();
                bm[k] -= h;
                let fd = (d.loglik(&bp).unwrap() - d.loglik(&bm).unwrap()) / (2.0 * h);
                assert!(
                    (fd - acc.grad[k]).abs() < 1e-6 * (1.0 + acc.grad[k].abs()),
                    "{:?} k={k}: {fd} vs {}",
                    d.family,
                    acc.grad[k]
                );
                let gp = d.accumulate(&bp).unwrap().grad;
                let gm = d.accumulate(&bm).unwrap().grad;
                for l in 0..d.p() {
                    let fdh = -(gp[l] - gm[l]) / (2.0 * h);
                    assert!((fdh - acc.hess[(l, k)]).abs() < 1e-5 * (1.0 + acc.hess[(l, k)].abs()));
                }
            }
            assert_eq!(acc.hess, acc.hess.transpose());
            assert!((acc.loglik - d.loglik(&beta).unwrap()).abs() < 1e-10 * acc.loglik.abs());
        }
    }

    #[test]
    fn accumulation_is_additive_over_partitions() {
        let (d, beta) = random_gev_design(6);
        let whole = d.accumulate(&beta).unwrap();
        let first: Vec<usize> = (0..d.n()).filter(|i| i % 3 == 0).collect();
        let rest: Vec<usize> = (0..d.n()).filter(|i| i % 3 != 0).collect();
        let a = d.select_rows(&first).accumulate(&beta).unwrap();
        let b = d.select_rows(&rest).accumulate(&beta).unwrap();
        let rel = |x: f64, y: f64| (x - y).abs() <= 1e-12 * (1.0 + x.abs());
        assert!(rel(whole.loglik, a.loglik + b.loglik));
        for k in 0..d.p() {
            assert!(rel(whole.grad[k], a.grad[k] + b.grad[k]));
            for l in 0..d.p() {
                assert!(rel(whole.hess[(k, l)], a.hess[(k, l)] + b.hess[(k, l)]));
            }
        }
    }

    #[test]
    fn penalty_quadratic_form_is_blockwise() {
        let (d, beta) = random_poisson_design(7);
        let lambda = [2.5];
        let s = d.penalty_matrix(&lambda);
        let b = DVector::from_vec(beta.clone());
        let dense = (b.transpose() * &s * &b)[(0, 0)];
        let blockwise = d.penalty_quadratic(&lambda, &beta);
        assert!((dense - blockwise).abs() <= 1e-12 * dense.abs());
        let sb = d.penalty_times(&lambda, &beta);
        assert!((&s * &b - sb).amax() < 1e-12);
    }

    #[test]
    fn known_variance_has_no_third_order_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DMatrix::from_fn(20, 3, |_, _| rng.random::<f64>());
        let y: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let d = known_variance(x, y, vec![]);
        let m = d
            .hessian_lambda_derivative(&[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5])
            .unwrap();
        assert_eq!(m, DMatrix::zeros(3, 3));
    }

    #[test]
    fn poisson_single_observation_third_order_term() {
        let d = ModelDesign::from_blocks(
            Family::Poisson,
            vec![2.0],
            vec![DMatrix::from_element(1, 1, 1.0)],
            vec![],
        )
        .unwrap();
        let m = d.hessian_lambda_derivative(&[0.0], &[1.0]).unwrap();
        assert!((m[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hessian_derivative_matches_finite_difference_along_direction() {
        let (d, beta) = random_gev_design(9);
        let v: Vec<f64> = (0..d.p()).map(|k| ((k * 7 % 5) as f64 - 2.0) * 0.1).collect();
        let dh = d.hessian_lambda_derivative(&beta, &v).unwrap();
        let h = 1e-5;
        let shift = |s: f64| -> Vec<f64> { beta.iter().zip(&v).map(|(b, vi)| b + s * vi).collect() };
        let hp = d.accumulate(&shift(h)).unwrap().hess;
        let hm = d.accumulate(&shift(-h)).unwrap().hess;
        let fd = (hp - hm) / (2.0 * h);
        let scale = fd.amax().max(1.0);
        assert!((fd - &dh).amax() < 1e-5 * scale);
    }

    #[test]
    fn trace_gradient_matches_explicit_traces() {
        let (d, beta) = random_gev_design(10);
        let p = d.p();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
        let a = &r * r.transpose();
        let g = d.third_order_trace_gradient(&beta, &a).unwrap();
        for _ in 0..3 {
            let v: Vec<f64> = (0..p).map(|_| rng.random::<f64>() - 0.5).collect();
            let dh = d.hessian_lambda_derivative(&beta, &v).unwrap();
            let explicit = (&a * dh).trace();
            let fast: f64 = g.iter().zip(&v).map(|(x, y)| x * y).sum();
            assert!(
                (explicit - fast).abs() < 1e-9 * (1.0 + explicit.abs()),
                "{explicit} vs {fast}"
            );
        }
    }

    #[test]
    fn support_violation_reports_global_index() {
        let y = vec![0.0, 0.1, -50.0];
        let x = DMatrix::from_element(3, 1, 1.0);
        let d = ModelDesign::from_blocks(Family::Gev, y, vec![x.clone(), x.clone(), x], vec![]).unwrap();
        let err = d.accumulate(&[0.0, 0.0, 0.5]).unwrap_err();
        assert_eq!(err.index, 2);
        assert_eq!(d.loglik(&[0.0, 0.0, 0.5]).unwrap_err().index, 2);
    }

    #[test]
    fn restrict_drops_columns_and_keeps_penalties() {
        let (d, _) = random_poisson_design(12);
        // columns: intercept, linear x2, then the smooth
        let pen = &d.penalties[0];
        assert_eq!(pen.start, 2);
        let drop = [1, pen.start + 1];
        let kept: Vec<usize> = (0..d.p()).filter(|k| !drop.contains(k)).collect();
        let r = d.restrict(&kept);
        assert_eq!(r.p(), d.p() - 2);
        assert_eq!(r.q(), 1);
        assert_eq!(r.penalties[0].len(), pen.len() - 1);
        assert_eq!(r.penalties[0].start, 1);
        assert_eq!(r.blocks[0].column(2), d.blocks[0].column(4));
        assert_eq!(r.intercepts, vec![Some(0)]);
    }

    #[test]
    fn layout_rows_reproduce_training_design() {
        let (d, _) = random_poisson_design(13);
        let t = uniform_table(120, &["x1", "x2"], 13);
        let rows = d.layout.as_ref().unwrap().blocks[0].rows(&t).unwrap();
        assert_eq!(rows.x, d.blocks[0]);
        assert!(rows.extrapolated.iter().all(|e| !e));
    }

    #[test]
    fn initial_beta_sets_intercepts() {
        let (d, _) = random_gev_design(14);
        let b = d.initial_beta();
        assert!(b[d.starts[1]].is_finite());
        assert_eq!(b[d.starts[2]], 0.0);
        assert_eq!(b.iter().filter(|v| **v != 0.0).count(), 2);
    }
}
