//! Summation helpers and small dense-matrix utilities.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Running sum that is exact until the final rounding (Shewchuk partials).
///
/// The result is the correctly rounded value of the true sum, so it does not
/// depend on the order in which terms are added or on how partial sums are merged.
#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
    nonfinite: Option<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        if !value.is_finite() {
            self.nonfinite = Some(self.nonfinite.map_or(value, |s| s + value));
            return;
        }
        let mut x = value;
        let mut kept = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        self.partials.truncate(kept);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
        if let Some(v) = other.nonfinite {
            self.add(v);
        }
    }

    pub fn value(&self) -> f64 {
        if let Some(v) = self.nonfinite {
            return v;
        }
        let p = &self.partials;
        let Some(&last) = p.last() else { return 0.0 };
        let mut hi = last;
        let mut lo = 0.0;
        let mut j = p.len() - 1;
        while j > 0 {
            j -= 1;
            let x = hi;
            let y = p[j];
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        if j > 0 && ((lo < 0.0 && p[j - 1] < 0.0) || (lo > 0.0 && p[j - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        for v in iter {
            s.add(v);
        }
        s
    }
}

pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().collect::<ExactSum>().value()
}

/// Elementwise exact accumulator for matrices of a fixed shape.
#[derive(Debug, Clone)]
pub struct MatrixSum {
    nrows: usize,
    ncols: usize,
    cells: Vec<ExactSum>,
}

impl MatrixSum {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, cells: vec![ExactSum::new(); nrows * ncols] }
    }

    pub fn add(&mut self, m: &DMatrix<f64>) {
        debug_assert_eq!((m.nrows(), m.ncols()), (self.nrows, self.ncols));
        for (cell, v) in self.cells.iter_mut().zip(m.iter()) {
            cell.add(*v);
        }
    }

    pub fn add_vector(&mut self, v: &DVector<f64>) {
        debug_assert_eq!((v.len(), 1), (self.nrows, self.ncols));
        for (cell, x) in self.cells.iter_mut().zip(v.iter()) {
            cell.add(*x);
        }
    }

    pub fn merge(&mut self, other: &MatrixSum) {
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.merge(b);
        }
    }

    pub fn value(&self) -> DMatrix<f64> {
        DMatrix::from_iterator(self.nrows, self.ncols, self.cells.iter().map(ExactSum::value))
    }

    pub fn vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.nrows * self.ncols, self.cells.iter().map(ExactSum::value))
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Lower Cholesky factor, or a decomposition error naming `what`.
pub fn cholesky_lower(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::not_spd(what));
    }
    nalgebra::Cholesky::new(m.clone())
        .map(|c| c.unpack())
        .ok_or_else(|| Error::not_spd(what))
}

pub fn log_det_from_cholesky(l: &DMatrix<f64>) -> f64 {
    2.0 * exact_sum(l.diagonal().iter().map(|d| d.ln()))
}

/// Solves L X = B for lower-triangular L.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b).expect("Cholesky factor has a positive diagonal")
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(m.clone()).ok_or_else(|| Error::not_spd(what))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Row-wise lower triangle: (0,0), (1,0), (1,1), (2,0), ...
pub fn lower_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * (m.nrows() + 1) / 2);
    for i in 0..m.nrows() {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_lower_triangle(values: &[f64], dim: usize) -> Result<DMatrix<f64>> {
    if values.len() != dim * (dim + 1) / 2 {
        return Err(Error::Data(format!(
            "expected {} lower-triangle entries for a {dim}x{dim} matrix, got {}",
            dim * (dim + 1) / 2,
            values.len()
        )));
    }
    let mut m = DMatrix::zeros(dim, dim);
    let mut k = 0;
    for i in 0..dim {
        for j in 0..=i {
            m[(i, j)] = values[k];
            m[(j, i)] = values[k];
            k += 1;
        }
    }
    Ok(m)
}

/// Column-stacking vec operator.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Half-vectorization: the lower triangle stacked column by column.
pub fn vech(m: &DMatrix<f64>) -> DVector<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for j in 0..d {
        for i in j..d {
            out.push(m[(i, j)]);
        }
    }
    DVector::from_vec(out)
}

pub fn unvech(v: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut k = 0;
    for j in 0..d {
        for i in j..d {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    m
}

/// Duplication matrix D with vec(S) = D vech(S) for symmetric S.
pub fn duplication(d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d * d, d * (d + 1) / 2);
    let mut k = 0;
    for j in 0..d {
        for i in j..d {
            out[(i + j * d, k)] = 1.0;
            out[(j + i * d, k)] = 1.0;
            k += 1;
        }
    }
    out
}
