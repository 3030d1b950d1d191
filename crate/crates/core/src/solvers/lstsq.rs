use super::Matrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// In-place Cholesky factorisation of a symmetric `n x n` matrix into its
/// lower factor. Fails when a pivot is not safely positive.
fn cholesky(m: &mut [f64], n: usize) -> Option<()> {
    let max_diag = (0..n).map(|i| m[i * n + i].abs()).fold(0.0, f64::max);
    let floor = n as f64 * f64::EPSILON * max_diag;
    for j in 0..n {
        let mut d = m[j * n + j];
        for k in 0..j {
            d -= m[j * n + k] * m[j * n + k];
        }
        if !(d > floor) {
            return None;
        }
        let d = d.sqrt();
        m[j * n + j] = d;
        for i in j + 1..n {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= m[i * n + k] * m[j * n + k];
            }
            m[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = 0.0;
        }
    }
    Some(())
}

/// Solves `L L^T x = rhs` given the lower factor.
fn solve_factored(l: &[f64], n: usize, rhs: &[f64]) -> Vec<f64> {
    let mut y = rhs.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// Solves the symmetric positive-definite system `m x = rhs`.
pub fn cholesky_solve(m: &[f64], n: usize, rhs: &[f64]) -> Result<Vec<f64>> {
    if m.len() != n * n || rhs.len() != n {
        return Err(Error::shape("cholesky system", n * n, m.len()));
    }
    let mut l = m.to_vec();
    cholesky(&mut l, n).ok_or_else(|| Error::invalid("matrix is not positive definite"))?;
    Ok(solve_factored(&l, n, rhs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefitResult {
    /// `[c_out, kept, kh, kw]`.
    pub weights: Tensor,
    /// Damping actually used; larger than requested when the undamped
    /// normal matrix was not positive definite.
    pub damping: f64,
    /// Per output channel: `||P^T (t - P w)||`.
    pub orthogonality: Vec<f64>,
    /// Per output channel: `damping * ||w|| + 1e-8 * max_col_norm(P) * ||t||`.
    pub orthogonality_bound: Vec<f64>,
    /// Per output channel: `||t - P w||^2`.
    pub residual_sq: Vec<f64>,
}

impl RefitResult {
    pub fn is_orthogonal(&self) -> bool {
        self.orthogonality
            .iter()
            .zip(&self.orthogonality_bound)
            .all(|(r, b)| r <= b)
    }

    /// Largest `residual / bound` over output channels.
    pub fn worst_orthogonality_ratio(&self) -> f64 {
        self.orthogonality
            .iter()
            .zip(&self.orthogonality_bound)
            .map(|(r, b)| if *b > 0.0 { r / b } else if *r > 0.0 { f64::INFINITY } else { 0.0 })
            .fold(0.0, f64::max)
    }
}

/// Fits `w_i = argmin ||t_i - P w_i||^2 + damping ||w_i||^2` for every
/// output channel `i` through `(P^T P + damping I) w_i = P^T t_i`, with one
/// step of iterative refinement, and reshapes the solutions into filters
/// of `kernel = (kh, kw)` over `P.cols() / (kh * kw)` kept channels.
///
/// When the normal matrix is not positive definite the damping is raised
/// to `1e-8 * trace(P^T P) / cols` and the solve is retried.
pub fn least_squares_refit(
    patches: &Matrix,
    targets: &Matrix,
    damping: f64,
    kernel: (usize, usize),
) -> Result<RefitResult> {
    let (rows, cols) = (patches.rows(), patches.cols());
    let c_out = targets.cols();
    if targets.rows() != rows {
        return Err(Error::shape("refit target rows", rows, targets.rows()));
    }
    let kernel_len = kernel.0 * kernel.1;
    if kernel_len == 0 || cols % kernel_len != 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "patch width {cols} is not a positive multiple of kernel {}x{}",
            kernel.0, kernel.1
        )));
    }
    if !(damping >= 0.0) || !damping.is_finite() {
        return Err(Error::invalid(format!("damping must be non-negative, got {damping}")));
    }
    if patches.data().iter().chain(targets.data()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("refit inputs contain non-finite entries"));
    }

    let gram = patches.gram();
    let trace: f64 = (0..cols).map(|i| gram[i * cols + i]).sum();
    let damped = |eps: f64| {
        let mut m = gram.clone();
        for i in 0..cols {
            m[i * cols + i] += eps;
        }
        m
    };

    let mut used = damping;
    let mut normal = damped(used);
    let mut factor = normal.clone();
    let mut weights = vec![0.0; c_out * cols];
    let solvable = if cholesky(&mut factor, cols).is_some() {
        true
    } else if trace > 0.0 {
        used = damping.max(1e-8 * trace / cols as f64);
        normal = damped(used);
        factor = normal.clone();
        cholesky(&mut factor, cols).is_some()
    } else {
        // P is identically zero: every w gives the same residual.
        false
    };
    if !solvable && trace > 0.0 {
        return Err(Error::invalid("normal equations remain singular after damping"));
    }

    let col_norm_max = patches.column_norms().into_iter().fold(0.0, f64::max);
    let mut orthogonality = Vec::with_capacity(c_out);
    let mut bound = Vec::with_capacity(c_out);
    let mut residual_sq = Vec::with_capacity(c_out);
    for i in 0..c_out {
        let t: Vec<f64> = (0..rows).map(|r| targets.get(r, i)).collect();
        let pt = patches.transpose_mul(&t);
        let w = &mut weights[i * cols..(i + 1) * cols];
        if solvable {
            let mut sol = solve_factored(&factor, cols, &pt);
            let correction: Vec<f64> = (0..cols)
                .map(|a| pt[a] - normal[a * cols..(a + 1) * cols].iter().zip(&sol).map(|(m, s)| m * s).sum::<f64>())
                .collect();
            let delta = solve_factored(&factor, cols, &correction);
            for (s, d) in sol.iter_mut().zip(delta) {
                *s += d;
            }
            w.copy_from_slice(&sol);
        }
        let resid: Vec<f64> = patches.mul(w).into_iter().zip(&t).map(|(p, t)| t - p).collect();
        let ortho = patches.transpose_mul(&resid);
        let w_norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let t_norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        orthogonality.push(ortho.iter().map(|v| v * v).sum::<f64>().sqrt());
        bound.push(used * w_norm + 1e-8 * col_norm_max * t_norm);
        residual_sq.push(resid.iter().map(|v| v * v).sum());
    }
    Ok(RefitResult {
        weights: Tensor::new(vec![c_out, cols / kernel_len, kernel.0, kernel.1], weights)?,
        damping: used,
        orthogonality,
        orthogonality_bound: bound,
        residual_sq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Gauss-Jordan elimination with partial pivoting on the normal
    /// equations, eliminating columns right to left.
    fn gauss_jordan_normal_solve(p: &Matrix, t: &[f64]) -> Vec<f64> {
        let n = p.cols();
        let g = p.gram();
        let rhs = p.transpose_mul(t);
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row = g[i * n..(i + 1) * n].to_vec();
                row.push(rhs[i]);
                row
            })
            .collect();
        for col in (0..n).rev() {
            let pivot = (0..n)
                .filter(|&r| r <= col)
                .max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs()))
                .unwrap();
            aug.swap(pivot, col);
            let d = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= d;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[r][col];
                    let src = aug[col].clone();
                    for (v, s) in aug[r].iter_mut().zip(src) {
                        *v -= f * s;
                    }
                }
            }
        }
        aug.into_iter().map(|row| row[n]).collect()
    }

    #[test]
    fn recovers_generating_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_matrix(&mut rng, 60, 18);
        let truth = random_matrix(&mut rng, 3, 18);
        let mut t = Matrix::zeros(60, 3);
        for i in 0..3 {
            for (r, v) in p.mul(truth.row(i)).into_iter().enumerate() {
                t.set(r, i, v);
            }
        }
        let fit = least_squares_refit(&p, &t, 0.0, (3, 3)).unwrap();
        assert_eq!(fit.weights.dims(), &[3, 2, 3, 3]);
        assert_eq!(fit.damping, 0.0);
        for (w, e) in fit.weights.data().iter().zip(truth.data()) {
            assert!((w - e).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_targets_give_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_matrix(&mut rng, 20, 4);
        let fit = least_squares_refit(&p, &Matrix::zeros(20, 2), 0.0, (1, 1)).unwrap();
        assert!(fit.weights.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_matches_independent_normal_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_matrix(&mut rng, 50, 8);
        let t = random_matrix(&mut rng, 50, 2);
        let fit = least_squares_refit(&p, &t, 0.0, (2, 2)).unwrap();
        for i in 0..2 {
            let col: Vec<f64> = (0..50).map(|r| t.get(r, i)).collect();
            let w = gauss_jordan_normal_solve(&p, &col);
            let rss: f64 = p.mul(&w).iter().zip(&col).map(|(a, b)| (b - a).powi(2)).sum();
            assert!((rss.sqrt() - fit.residual_sq[i].sqrt()).abs() < 1e-9);
        }
        assert!(fit.is_orthogonal());
    }

    #[test]
    fn rank_deficiency_escalates_damping() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_matrix(&mut rng, 10, 2);
        // Duplicate columns make P^T P singular.
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|r| vec![base.get(r, 0), base.get(r, 1), base.get(r, 0), base.get(r, 1)])
            .collect();
        let p = Matrix::from_rows(&rows).unwrap();
        let t = random_matrix(&mut rng, 10, 1);
        let fit = least_squares_refit(&p, &t, 0.0, (1, 1)).unwrap();
        let trace: f64 = p.column_norms().iter().map(|v| v * v).sum();
        assert!((fit.damping - 1e-8 * trace / 4.0).abs() <= 1e-12 * fit.damping);
        assert!(fit.is_orthogonal());
        assert!(fit.weights.all_finite());
    }

    #[test]
    fn zero_patches_give_zero_weights() {
        let fit = least_squares_refit(&Matrix::zeros(5, 2), &Matrix::zeros(5, 1), 0.0, (1, 1)).unwrap();
        assert!(fit.weights.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let p = Matrix::zeros(5, 4);
        assert!(least_squares_refit(&p, &Matrix::zeros(4, 1), 0.0, (1, 1)).is_err());
        assert!(least_squares_refit(&p, &Matrix::zeros(5, 1), 0.0, (3, 3)).is_err());
        assert!(least_squares_refit(&p, &Matrix::zeros(5, 1), -1.0, (1, 1)).is_err());
    }
}
