//! Covariate design assembled from site, year and site-by-year blocks.
//!
//! The row for cell (i, j) is the concatenation
//! `[site row i | year row j | cell row (i, j)]`, i.e. the Kronecker layout
//! `X = [X_R ⊗ 1_p, 1_n ⊗ X_C, X_E]`. Products with `X` and `Xᵀ` are computed
//! block-wise so indicator-coded effects never materialize as dense columns.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Which design to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectsDesign {
    /// Global intercept plus site and year indicators with the first level dropped.
    Full,
    /// Measured covariates supplied by the caller.
    Genuine,
}

/// One covariate block, either dense or indicator coded.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateBlock {
    Dense(DMatrix<f64>),
    /// Indicator coding of `levels` levels, first level dropped, optionally
    /// preceded by an all-ones intercept column.
    Effects { levels: usize, intercept: bool },
}

impl CovariateBlock {
    pub fn empty(rows: usize) -> Self {
        CovariateBlock::Dense(DMatrix::zeros(rows, 0))
    }

    pub fn nrows(&self) -> usize {
        match self {
            CovariateBlock::Dense(m) => m.nrows(),
            CovariateBlock::Effects { levels, .. } => *levels,
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            CovariateBlock::Dense(m) => m.ncols(),
            CovariateBlock::Effects { levels, intercept } => levels - 1 + usize::from(*intercept),
        }
    }

    /// Value of entry (r, c).
    pub fn get(&self, r: usize, c: usize) -> f64 {
        match self {
            CovariateBlock::Dense(m) => m[(r, c)],
            CovariateBlock::Effects { intercept, .. } => {
                let off = usize::from(*intercept);
                if *intercept && c == 0 {
                    1.0
                } else if r >= 1 && c == r - 1 + off {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn push_nonzeros(&self, r: usize, offset: usize, out: &mut Vec<(usize, f64)>) {
        match self {
            CovariateBlock::Dense(m) => {
                for c in 0..m.ncols() {
                    let v = m[(r, c)];
                    if v != 0.0 {
                        out.push((offset + c, v));
                    }
                }
            }
            CovariateBlock::Effects { intercept, .. } => {
                let off = usize::from(*intercept);
                if *intercept {
                    out.push((offset, 1.0));
                }
                if r >= 1 {
                    out.push((offset + r - 1 + off, 1.0));
                }
            }
        }
    }

    /// `B c` for this block.
    fn mul(&self, coef: &[f64]) -> DVector<f64> {
        match self {
            CovariateBlock::Dense(m) => {
                if m.ncols() == 0 {
                    DVector::zeros(m.nrows())
                } else {
                    m * DVector::from_column_slice(coef)
                }
            }
            CovariateBlock::Effects { levels, intercept } => {
                let off = usize::from(*intercept);
                let base = if *intercept { coef[0] } else { 0.0 };
                DVector::from_fn(*levels, |r, _| if r == 0 { base } else { base + coef[r - 1 + off] })
            }
        }
    }

    /// `Bᵀ v` for this block.
    fn tmul(&self, v: &DVector<f64>) -> Vec<f64> {
        match self {
            CovariateBlock::Dense(m) => (m.transpose() * v).as_slice().to_vec(),
            CovariateBlock::Effects { levels, intercept } => {
                let off = usize::from(*intercept);
                let mut out = vec![0.0; self.ncols()];
                if *intercept {
                    out[0] = v.sum();
                }
                for r in 1..*levels {
                    out[r - 1 + off] = v[r];
                }
                out
            }
        }
    }

    /// `Σ_r w_r B[r,c]²` for every column c.
    fn weighted_sq_colsums(&self, w: &DVector<f64>) -> Vec<f64> {
        match self {
            CovariateBlock::Dense(m) => (0..m.ncols())
                .map(|c| (0..m.nrows()).map(|r| w[r] * m[(r, c)] * m[(r, c)]).sum())
                .collect(),
            CovariateBlock::Effects { .. } => self.tmul(w),
        }
    }

    fn is_indicator(&self) -> bool {
        matches!(self, CovariateBlock::Effects { .. })
    }
}

/// The full covariate design for an `n × p` panel.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n: usize,
    p: usize,
    site: CovariateBlock,
    year: CovariateBlock,
    /// `(n·p) × d3`, row `i·p + j` for cell (i, j).
    cell: DMatrix<f64>,
    kind: EffectsDesign,
}

impl DesignMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn kind(&self) -> EffectsDesign {
        self.kind
    }

    pub fn d1(&self) -> usize {
        self.site.ncols()
    }

    pub fn d2(&self) -> usize {
        self.year.ncols()
    }

    pub fn d3(&self) -> usize {
        self.cell.ncols()
    }

    pub fn d(&self) -> usize {
        self.d1() + self.d2() + self.d3()
    }

    pub fn site_block(&self) -> &CovariateBlock {
        &self.site
    }

    pub fn year_block(&self) -> &CovariateBlock {
        &self.year
    }

    pub fn cell_block(&self) -> &DMatrix<f64> {
        &self.cell
    }

    /// Column indices of the year-indicator coefficients under the full
    /// effects design (years 2..p), else `None`.
    pub fn year_effect_columns(&self) -> Option<std::ops::Range<usize>> {
        match (&self.kind, &self.year) {
            (EffectsDesign::Full, CovariateBlock::Effects { .. }) => {
                Some(self.d1()..self.d1() + self.d2())
            }
            _ => None,
        }
    }

    /// The d-vector x(i, j).
    pub fn row(&self, i: usize, j: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.d());
        for (k, v) in self.row_nonzeros(i, j) {
            out[k] = v;
        }
        out
    }

    /// Nonzero entries of x(i, j) as (column, value) pairs in column order.
    pub fn row_nonzeros(&self, i: usize, j: usize) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(4 + self.d3());
        self.push_row_nonzeros(i, j, &mut out);
        out
    }

    pub fn push_row_nonzeros(&self, i: usize, j: usize, out: &mut Vec<(usize, f64)>) {
        self.site.push_nonzeros(i, 0, out);
        self.year.push_nonzeros(j, self.d1(), out);
        let off = self.d1() + self.d2();
        let r = i * self.p + j;
        for c in 0..self.d3() {
            let v = self.cell[(r, c)];
            if v != 0.0 {
                out.push((off + c, v));
            }
        }
    }

    /// Linear predictor `x(i,j)ᵀ coef` for every cell, as an `n × p` matrix.
    pub fn linear_predictor(&self, coef: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(coef.len(), self.d(), "coefficient length must equal d");
        let (d1, d2) = (self.d1(), self.d2());
        let s = self.site.mul(&coef.as_slice()[..d1]);
        let y = self.year.mul(&coef.as_slice()[d1..d1 + d2]);
        let cell = if self.d3() > 0 {
            Some(&self.cell * coef.rows(d1 + d2, self.d3()))
        } else {
            None
        };
        DMatrix::from_fn(self.n, self.p, |i, j| {
            let mut v = s[i] + y[j];
            if let Some(c) = &cell {
                v += c[i * self.p + j];
            }
            v
        })
    }

    /// `Σ_ij w_ij x(i,j)` for an `n × p` weight matrix.
    pub fn tmul(&self, w: &DMatrix<f64>) -> DVector<f64> {
        let rows = DVector::from_fn(self.n, |i, _| w.row(i).sum());
        let cols = DVector::from_fn(self.p, |j, _| w.column(j).sum());
        let mut out = Vec::with_capacity(self.d());
        out.extend(self.site.tmul(&rows));
        out.extend(self.year.tmul(&cols));
        if self.d3() > 0 {
            let flat = DVector::from_fn(self.n * self.p, |r, _| w[(r / self.p, r % self.p)]);
            out.extend((self.cell.transpose() * flat).iter());
        }
        DVector::from_vec(out)
    }

    /// Diagonal of `Σ_ij w_ij x(i,j) x(i,j)ᵀ`.
    pub fn weighted_gram_diag(&self, w: &DMatrix<f64>) -> DVector<f64> {
        let rows = DVector::from_fn(self.n, |i, _| w.row(i).sum());
        let cols = DVector::from_fn(self.p, |j, _| w.column(j).sum());
        let mut out = Vec::with_capacity(self.d());
        out.extend(self.site.weighted_sq_colsums(&rows));
        out.extend(self.year.weighted_sq_colsums(&cols));
        for c in 0..self.d3() {
            let mut acc = 0.0;
            for i in 0..self.n {
                for j in 0..self.p {
                    let v = self.cell[(i * self.p + j, c)];
                    acc += w[(i, j)] * v * v;
                }
            }
            out.push(acc);
        }
        DVector::from_vec(out)
    }

    /// Dense `Σ_ij w_ij x(i,j) x(i,j)ᵀ` accumulated from sparse rows.
    pub fn weighted_gram(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.d();
        let mut g = DMatrix::zeros(d, d);
        let mut buf = Vec::new();
        for i in 0..self.n {
            for j in 0..self.p {
                let wij = w[(i, j)];
                if wij == 0.0 {
                    continue;
                }
                buf.clear();
                self.push_row_nonzeros(i, j, &mut buf);
                for &(a, va) in &buf {
                    for &(b, vb) in &buf {
                        g[(a, b)] += wij * va * vb;
                    }
                }
            }
        }
        g
    }

    /// `Σ_ij w_ij x(i,j) x(i,j)ᵀ v` without forming the Gram matrix.
    pub fn weighted_gram_mul(&self, w: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let eta = self.linear_predictor(v);
        self.tmul(&eta.component_mul(w))
    }

    /// Solves `(Σ w x xᵀ + ridge·I) δ = rhs`: dense Cholesky for small `d`,
    /// Jacobi-preconditioned CG otherwise.
    pub fn solve_weighted_normal(&self, w: &DMatrix<f64>, rhs: &DVector<f64>, ridge: f64) -> DVector<f64> {
        let d = self.d();
        if d <= 400 {
            let mut g = self.weighted_gram(w);
            for k in 0..d {
                g[(k, k)] += ridge;
            }
            let b = DMatrix::from_column_slice(d, 1, rhs.as_slice());
            match linalg::solve_symmetric(&g, &b) {
                Some(x) => x.column(0).into_owned(),
                None => DVector::zeros(d),
            }
        } else {
            let diag = self.weighted_gram_diag(w).add_scalar(ridge);
            linalg::pcg(
                |v| self.weighted_gram_mul(w, v) + v * ridge,
                rhs,
                &diag,
                1e-10,
                500,
            )
        }
    }

    /// Dense matrix of rows x(i,j) over cells with mask = true.
    pub fn restricted_rows(&self, mask: &[bool]) -> DMatrix<f64> {
        let cells: Vec<(usize, usize)> = (0..self.n * self.p)
            .filter(|&k| mask[k])
            .map(|k| (k / self.p, k % self.p))
            .collect();
        let mut m = DMatrix::zeros(cells.len(), self.d());
        for (r, &(i, j)) in cells.iter().enumerate() {
            for (c, v) in self.row_nonzeros(i, j) {
                m[(r, c)] = v;
            }
        }
        m
    }

    /// Standardizes dense measured columns (indicators untouched).
    ///
    /// Columns are scaled to unit standard deviation over all cells; they are
    /// also centered when the design spans a constant column, which keeps the
    /// column span unchanged.
    pub fn standardized(&self) -> (DesignMatrix, Standardization) {
        let d = self.d();
        let mut transforms = vec![ColumnTransform::identity(); d];
        // Cell-level mean and sd of a column of each block.
        let site_stats = block_stats(&self.site, self.n);
        let year_stats = block_stats(&self.year, self.p);
        let cell_stats: Vec<Option<(f64, f64)>> = (0..self.d3())
            .map(|c| {
                let col: Vec<f64> = self.cell.column(c).iter().cloned().collect();
                Some(mean_sd(&col))
            })
            .collect();
        let all_stats: Vec<Option<(f64, f64)>> = site_stats
            .into_iter()
            .chain(year_stats)
            .chain(cell_stats)
            .collect();
        let intercept = self.intercept_column();
        let can_center = intercept.is_some();
        for (k, st) in all_stats.iter().enumerate() {
            let Some((mean, sd)) = *st else { continue };
            if Some(k) == intercept.map(|(c, _)| c) {
                continue;
            }
            if sd <= 1e-12 * (mean.abs() + 1.0) {
                continue;
            }
            transforms[k] = ColumnTransform {
                center: if can_center { mean } else { 0.0 },
                scale: sd,
            };
        }
        let mut out = self.clone();
        let d1 = self.d1();
        let d2 = self.d2();
        if let CovariateBlock::Dense(m) = &mut out.site {
            for c in 0..m.ncols() {
                let t = transforms[c];
                m.column_mut(c).apply(|v| *v = (*v - t.center) / t.scale);
            }
        }
        if let CovariateBlock::Dense(m) = &mut out.year {
            for c in 0..m.ncols() {
                let t = transforms[d1 + c];
                m.column_mut(c).apply(|v| *v = (*v - t.center) / t.scale);
            }
        }
        for c in 0..out.cell.ncols() {
            let t = transforms[d1 + d2 + c];
            out.cell.column_mut(c).apply(|v| *v = (*v - t.center) / t.scale);
        }
        (out, Standardization { transforms, intercept })
    }

    /// A column that is constant and nonzero over every cell, if any.
    fn intercept_column(&self) -> Option<(usize, f64)> {
        if let CovariateBlock::Effects { intercept: true, .. } = self.site {
            return Some((0, 1.0));
        }
        let offsets = [0, self.d1(), self.d1() + self.d2()];
        let check = |col: Vec<f64>| -> Option<f64> {
            let first = *col.first()?;
            (first != 0.0 && col.iter().all(|&v| v == first)).then_some(first)
        };
        if let CovariateBlock::Dense(m) = &self.site {
            for c in 0..m.ncols() {
                if let Some(v) = check(m.column(c).iter().cloned().collect()) {
                    return Some((offsets[0] + c, v));
                }
            }
        }
        if let CovariateBlock::Dense(m) = &self.year {
            for c in 0..m.ncols() {
                if let Some(v) = check(m.column(c).iter().cloned().collect()) {
                    return Some((offsets[1] + c, v));
                }
            }
        }
        for c in 0..self.d3() {
            if let Some(v) = check(self.cell.column(c).iter().cloned().collect()) {
                return Some((offsets[2] + c, v));
            }
        }
        None
    }

    /// True when every block is indicator coded or empty.
    pub fn is_pure_effects(&self) -> bool {
        self.site.is_indicator() && self.year.is_indicator() && self.d3() == 0
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn block_stats(block: &CovariateBlock, rows: usize) -> Vec<Option<(f64, f64)>> {
    match block {
        CovariateBlock::Dense(m) => (0..m.ncols())
            .map(|c| {
                let col: Vec<f64> = (0..rows).map(|r| m[(r, c)]).collect();
                Some(mean_sd(&col))
            })
            .collect(),
        CovariateBlock::Effects { .. } => vec![None; block.ncols()],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub center: f64,
    pub scale: f64,
}

impl ColumnTransform {
    fn identity() -> Self {
        ColumnTransform { center: 0.0, scale: 1.0 }
    }
}

/// Record of the column transforms applied by [`DesignMatrix::standardized`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub transforms: Vec<ColumnTransform>,
    /// Intercept column index and its constant value.
    pub intercept: Option<(usize, f64)>,
}

impl Standardization {
    pub fn identity(d: usize) -> Self {
        Standardization { transforms: vec![ColumnTransform::identity(); d], intercept: None }
    }

    /// Coefficients on the original columns from coefficients on the
    /// standardized columns; linear predictors are unchanged.
    pub fn to_original(&self, coef: &DVector<f64>) -> DVector<f64> {
        let mut out = coef.clone();
        let mut shift = 0.0;
        for (k, t) in self.transforms.iter().enumerate() {
            out[k] = coef[k] / t.scale;
            shift += coef[k] * t.center / t.scale;
        }
        if let Some((c, v)) = self.intercept {
            out[c] -= shift / v;
        }
        out
    }

    /// Inverse of [`Standardization::to_original`].
    pub fn to_standardized(&self, coef: &DVector<f64>) -> DVector<f64> {
        let mut out = coef.clone();
        let mut shift = 0.0;
        for (k, t) in self.transforms.iter().enumerate() {
            out[k] = coef[k] * t.scale;
            shift += coef[k] * t.center;
        }
        if let Some((c, v)) = self.intercept {
            out[c] += shift / v;
        }
        out
    }

    /// Jacobian `∂ original / ∂ standardized` (a d × d matrix).
    pub fn jacobian(&self) -> DMatrix<f64> {
        let d = self.transforms.len();
        let mut jac = DMatrix::zeros(d, d);
        for (k, t) in self.transforms.iter().enumerate() {
            jac[(k, k)] = 1.0 / t.scale;
            if let Some((c, v)) = self.intercept {
                jac[(c, k)] -= t.center / t.scale / v;
            }
        }
        jac
    }
}

/// Builds a design from optional measured blocks (genuine) or from site
/// and year indicators plus an optional cell block (full effects).
pub fn assemble_design(
    site_block: Option<DMatrix<f64>>,
    year_block: Option<DMatrix<f64>>,
    cell_block: Option<DMatrix<f64>>,
    effects: EffectsDesign,
    n: usize,
    p: usize,
) -> Result<DesignMatrix> {
    let cell = match cell_block {
        Some(m) => {
            if m.nrows() != n * p {
                return Err(Error::Dimension {
                    block: "cell".into(),
                    message: format!("{} rows, expected n·p = {}", m.nrows(), n * p),
                });
            }
            m
        }
        None => DMatrix::zeros(n * p, 0),
    };
    let (site, year) = match effects {
        EffectsDesign::Full => {
            if n < 1 || p < 1 {
                return Err(Error::Dimension { block: "site".into(), message: "empty panel".into() });
            }
            (
                CovariateBlock::Effects { levels: n, intercept: true },
                CovariateBlock::Effects { levels: p, intercept: false },
            )
        }
        EffectsDesign::Genuine => {
            let site = match site_block {
                Some(m) if m.nrows() != n => {
                    return Err(Error::Dimension {
                        block: "site".into(),
                        message: format!("{} rows, expected n = {}", m.nrows(), n),
                    })
                }
                Some(m) => CovariateBlock::Dense(m),
                None => CovariateBlock::empty(n),
            };
            let year = match year_block {
                Some(m) if m.nrows() != p => {
                    return Err(Error::Dimension {
                        block: "year".into(),
                        message: format!("{} rows, expected p = {}", m.nrows(), p),
                    })
                }
                Some(m) => CovariateBlock::Dense(m),
                None => CovariateBlock::empty(p),
            };
            (site, year)
        }
    };
    let design = DesignMatrix { n, p, site, year, cell, kind: effects };
    if design.d() == 0 {
        return Err(Error::Dimension { block: "design".into(), message: "no covariate columns".into() });
    }
    for (k, v) in design.cell.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Validation(format!("non-finite cell covariate at flat index {k}")));
        }
    }
    for blk in [&design.site, &design.year] {
        if let CovariateBlock::Dense(m) = blk {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("non-finite covariate value".into()));
            }
        }
    }
    Ok(design)
}

/// Convenience: an intercept-only genuine design.
pub fn intercept_design(n: usize, p: usize) -> DesignMatrix {
    assemble_design(Some(DMatrix::from_element(n, 1, 1.0)), None, None, EffectsDesign::Genuine, n, p)
        .expect("intercept design is always valid")
}

/// Numerical rank of the restricted design `X^O` (rows with mask = true).
pub fn restricted_rank(design: &DesignMatrix, mask: &[bool]) -> usize {
    let xo = design.restricted_rows(mask);
    linalg::numerical_rank(&xo, design.n() * design.p())
}

/// Cheap full-rank check via a pivoted Cholesky of the restricted Gram
/// matrix, used where an SVD of `X^O` would be too costly.
pub fn restricted_full_rank(design: &DesignMatrix, mask: &[bool]) -> bool {
    let w = DMatrix::from_fn(design.n(), design.p(), |i, j| if mask[i * design.p() + j] { 1.0 } else { 0.0 });
    let g = design.weighted_gram(&w);
    linalg::psd_rank(&g, 1e-11) == design.d()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concatenation_contract() {
        let xr = DMatrix::from_row_slice(2, 1, &[1.5, 2.5]);
        let xc = DMatrix::from_row_slice(2, 1, &[7.0, 8.0]);
        let d = assemble_design(Some(xr), Some(xc), None, EffectsDesign::Genuine, 2, 2).unwrap();
        // x(2,1) in one-based indexing
        assert_eq!(d.row(1, 0).as_slice(), &[2.5, 7.0]);
    }

    #[test]
    fn effects_dimension() {
        let d = assemble_design(None, None, None, EffectsDesign::Full, 3, 4).unwrap();
        assert_eq!(d.d(), 6);
    }

    #[test]
    fn effects_row_nonzero_counts() {
        let d = assemble_design(None, None, None, EffectsDesign::Full, 3, 4).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let nnz = d.row(i, j).iter().filter(|v| **v != 0.0).count();
                let expected = 1 + usize::from(i > 0) + usize::from(j > 0);
                assert_eq!(nnz, expected, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn wrong_cell_rows_rejected() {
        let err = assemble_design(None, None, Some(DMatrix::zeros(5, 1)), EffectsDesign::Full, 2, 2).unwrap_err();
        assert!(matches!(err, Error::Dimension { ref block, .. } if block == "cell"));
    }

    #[test]
    fn wrong_site_rows_rejected() {
        let err = assemble_design(Some(DMatrix::zeros(3, 1)), None, None, EffectsDesign::Genuine, 2, 2).unwrap_err();
        assert!(matches!(err, Error::Dimension { ref block, .. } if block == "site"));
    }

    #[test]
    fn structured_products_match_dense_rows() {
        let n = 4;
        let p = 3;
        let cell = DMatrix::from_fn(n * p, 2, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let d = assemble_design(None, None, Some(cell), EffectsDesign::Full, n, p).unwrap();
        let coef = DVector::from_fn(d.d(), |k, _| 0.1 * k as f64 - 0.3);
        let eta = d.linear_predictor(&coef);
        let w = DMatrix::from_fn(n, p, |i, j| (i + 2 * j) as f64 * 0.25);
        let mut tm = DVector::zeros(d.d());
        let mut gram = DMatrix::zeros(d.d(), d.d());
        for i in 0..n {
            for j in 0..p {
                let x = d.row(i, j);
                assert!((x.dot(&coef) - eta[(i, j)]).abs() < 1e-12);
                tm += &x * w[(i, j)];
                gram += &x * x.transpose() * w[(i, j)];
            }
        }
        assert!((d.tmul(&w) - tm).norm() < 1e-12);
        assert!((d.weighted_gram(&w) - &gram).norm() < 1e-12);
        assert!((d.weighted_gram_diag(&w) - gram.diagonal()).norm() < 1e-12);
        assert!((d.weighted_gram_mul(&w, &coef) - &gram * &coef).norm() < 1e-12);
    }

    #[test]
    fn rank_of_effects_design_is_full() {
        let d = assemble_design(None, None, None, EffectsDesign::Full, 4, 5).unwrap();
        assert_eq!(restricted_rank(&d, &vec![true; 20]), d.d());
        assert!(restricted_full_rank(&d, &vec![true; 20]));
    }

    #[test]
    fn duplicate_column_drops_rank() {
        let xr = DMatrix::from_fn(5, 3, |i, c| if c == 0 { 1.0 } else { (i as f64).sin() + 0.1 * c as f64 * 0.0 });
        let d = assemble_design(Some(xr), None, None, EffectsDesign::Genuine, 5, 2).unwrap();
        assert_eq!(restricted_rank(&d, &vec![true; 10]), 2);
        assert!(!restricted_full_rank(&d, &vec![true; 10]));
    }

    #[test]
    fn standardization_preserves_linear_predictor() {
        let n = 6;
        let p = 4;
        let xr = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { 10.0 + 3.0 * i as f64 });
        let xc = DMatrix::from_fn(p, 1, |j, _| 1990.0 + j as f64);
        let d = assemble_design(Some(xr), Some(xc), None, EffectsDesign::Genuine, n, p).unwrap();
        let (ds, rec) = d.standardized();
        let a = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let b = rec.to_original(&a);
        let e1 = ds.linear_predictor(&a);
        let e2 = d.linear_predictor(&b);
        assert!((e1 - e2).abs().max() < 1e-9);
        let back = rec.to_standardized(&b);
        assert!((back - a).norm() < 1e-12);
    }
}
