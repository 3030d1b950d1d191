//! Numerical engines behind channel selection and weight reconstruction:
//! an l1-penalised least-squares solver with a budget-driven penalty search,
//! and a damped normal-equations least-squares fit.

mod lasso;
mod lstsq;

pub use lasso::{lambda_search, lasso_coordinate_descent, soft_threshold, LassoFit, SearchSettings, SelectionResult};
pub use lstsq::{cholesky_solve, least_squares_refit, RefitResult};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix data length", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(format!("matrix row {r} length"), cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self^T self`, accumulated row by row.
    pub fn gram(&self) -> Vec<f64> {
        let n = self.cols;
        let mut g = vec![0.0; n * n];
        for r in 0..self.rows {
            let row = self.row(r);
            for (a, &ra) in row.iter().enumerate() {
                if ra == 0.0 {
                    continue;
                }
                let grow = &mut g[a * n..(a + 1) * n];
                for (gv, &rb) in grow.iter_mut().zip(row) {
                    *gv += ra * rb;
                }
            }
        }
        g
    }

    /// `self^T v`.
    pub fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate().take(self.rows) {
            if vr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        out
    }

    /// `self x`.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, &a) in sq.iter_mut().zip(self.row(r)) {
                *s += a * a;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }
}

/// Design matrix `A` and target `b` of the selection problem
/// `min_beta ||b - A beta||^2 + lambda ||beta||_1`.
///
/// Rows are (probe, output channel) pairs; columns are input channels.
/// The Gram matrix, `A^T b`, `b^T b` and column norms are cached at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSystem {
    a: Matrix,
    b: Vec<f64>,
    gram: Vec<f64>,
    atb: Vec<f64>,
    btb: f64,
    col_norms: Vec<f64>,
}

impl WeightedSystem {
    pub fn new(a: Matrix, b: Vec<f64>) -> Result<Self> {
        if a.rows() == 0 || a.cols() == 0 {
            return Err(Error::invalid("weighted system needs at least one row and one column"));
        }
        if b.len() != a.rows() {
            return Err(Error::shape("target length", a.rows(), b.len()));
        }
        if a.data().iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::invalid("weighted system contains non-finite entries"));
        }
        let gram = a.gram();
        let atb = a.transpose_mul(&b);
        let btb = b.iter().map(|v| v * v).sum();
        let col_norms = a.column_norms();
        Ok(WeightedSystem {
            a,
            b,
            gram,
            atb,
            btb,
            col_norms,
        })
    }

    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    pub fn cols(&self) -> usize {
        self.a.cols()
    }

    pub fn design(&self) -> &Matrix {
        &self.a
    }

    pub fn target(&self) -> &[f64] {
        &self.b
    }

    pub fn column_norms(&self) -> &[f64] {
        &self.col_norms
    }

    pub fn target_norm(&self) -> f64 {
        self.btb.sqrt()
    }

    /// Column `j` is identically zero.
    pub fn is_zero_column(&self, j: usize) -> bool {
        self.gram[j * self.cols() + j] == 0.0
    }

    pub fn nonzero_columns(&self) -> usize {
        (0..self.cols()).filter(|&j| !self.is_zero_column(j)).count()
    }

    /// `2 max_j |A_j^T b|`: the smallest penalty at which `beta = 0`.
    pub fn lambda_max(&self) -> f64 {
        2.0 * self.atb.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `max_j ||A_j|| * ||b||`, the scale used by optimality tolerances.
    pub fn scale(&self) -> f64 {
        self.col_norms.iter().cloned().fold(0.0, f64::max) * self.target_norm()
    }

    /// `b - A beta`, evaluated row by row.
    pub fn residual(&self, beta: &[f64]) -> Vec<f64> {
        self.a
            .mul(beta)
            .into_iter()
            .zip(&self.b)
            .map(|(p, t)| t - p)
            .collect()
    }

    /// `||b - A beta||^2 + lambda ||beta||_1`, evaluated directly on `A`.
    pub fn objective(&self, beta: &[f64], lambda: f64) -> f64 {
        let rss: f64 = self.residual(beta).iter().map(|r| r * r).sum();
        rss + lambda * beta.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// `A_j^T (b - A beta)` for every column, through the cached Gram matrix.
    pub fn correlations(&self, beta: &[f64]) -> Vec<f64> {
        let n = self.cols();
        (0..n)
            .map(|j| {
                let gb: f64 = self.gram[j * n..(j + 1) * n].iter().zip(beta).map(|(g, b)| g * b).sum();
                self.atb[j] - gb
            })
            .collect()
    }

    /// Same system with every row multiplied by `factor`.
    pub fn scaled_rows(&self, factor: f64) -> Result<Self> {
        let data = self.a.data().iter().map(|v| v * factor).collect();
        let a = Matrix::new(self.rows(), self.cols(), data)?;
        WeightedSystem::new(a, self.b.iter().map(|v| v * factor).collect())
    }

    pub(crate) fn gram(&self) -> &[f64] {
        &self.gram
    }

    pub(crate) fn atb(&self) -> &[f64] {
        &self.atb
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan_and_empty_systems() {
        let a = Matrix::new(2, 1, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(WeightedSystem::new(a, vec![0.0, 0.0]), Err(Error::InvalidArgument(_))));
        let a = Matrix::new(0, 2, vec![]).unwrap();
        assert!(WeightedSystem::new(a, vec![]).is_err());
    }

    #[test]
    fn objective_is_penalised_residual() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let sys = WeightedSystem::new(a, vec![1.0, 1.0]).unwrap();
        let beta = [0.5, -0.25];
        let r0 = 1.0 - (0.5 - 0.5);
        let r1 = 1.0 - (1.5 - 1.0);
        let expected = r0 * r0 + r1 * r1 + 0.3 * 0.75;
        assert!((sys.objective(&beta, 0.3) - expected).abs() < 1e-15);
    }
}
