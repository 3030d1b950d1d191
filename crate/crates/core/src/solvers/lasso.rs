use serde::{Deserialize, Serialize};

use super::WeightedSystem;
use crate::error::{Error, Result};

/// `sign(z) * max(|z| - gamma, 0)`.
#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub beta: Vec<f64>,
    pub sweeps: usize,
    /// False when `max_sweeps` ran out before the change dropped below `tol`.
    pub converged: bool,
}

/// Cyclic coordinate descent on `||b - A beta||^2 + lambda ||beta||_1`,
/// coordinates visited in ascending order.
///
/// Stops once the largest coordinate change of a sweep is below `tol`.
/// All-zero columns are pinned to zero.
pub fn lasso_coordinate_descent(
    system: &WeightedSystem,
    lambda: f64,
    beta_init: &[f64],
    max_sweeps: usize,
    tol: f64,
) -> Result<LassoFit> {
    let n = system.cols();
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    if beta_init.len() != n {
        return Err(Error::shape("beta_init length", n, beta_init.len()));
    }
    if beta_init.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("beta_init contains non-finite entries"));
    }
    let gram = system.gram();
    let atb = system.atb();
    let half_lambda = 0.5 * lambda;

    let mut beta = beta_init.to_vec();
    for (j, b) in beta.iter_mut().enumerate() {
        if gram[j * n + j] == 0.0 {
            *b = 0.0;
        }
    }
    // q = G beta, refreshed every sweep to stop drift.
    let mut q = vec![0.0; n];
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        for (j, qj) in q.iter_mut().enumerate() {
            *qj = gram[j * n..(j + 1) * n].iter().zip(&beta).map(|(g, b)| g * b).sum();
        }
        let mut max_change = 0.0_f64;
        for j in 0..n {
            let gjj = gram[j * n + j];
            if gjj == 0.0 {
                continue;
            }
            let old = beta[j];
            let rho = atb[j] - (q[j] - gjj * old);
            let new = soft_threshold(rho, half_lambda) / gjj;
            let delta = new - old;
            if delta != 0.0 {
                beta[j] = new;
                for (k, qk) in q.iter_mut().enumerate() {
                    *qk += gram[k * n + j] * delta;
                }
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < tol {
            converged = true;
            break;
        }
    }
    Ok(LassoFit {
        beta,
        sweeps,
        converged,
    })
}

/// Penalty-search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSettings {
    /// Ratio between consecutive grid penalties; must exceed 1.
    pub grid_ratio: f64,
    /// Absolute first grid penalty; `None` means `1e-6 * lambda_max`.
    pub lambda_floor: Option<f64>,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            grid_ratio: 1.3,
            lambda_floor: None,
            tol: 1e-9,
            max_sweeps: 10_000,
        }
    }
}

/// Outcome of the budgeted penalty search.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// LASSO solution at `lambda_final`.
    pub beta: Vec<f64>,
    /// Selected channels, ascending. Nonzeros of `beta` plus any backfilled
    /// columns.
    pub support: Vec<usize>,
    /// Columns added after the search because `beta` had fewer than
    /// `budget` nonzeros.
    pub backfilled: Vec<usize>,
    pub lambda_final: f64,
    pub lambda_floor: f64,
    /// `||b - A beta||`.
    pub residual_norm: f64,
    /// Every solve of the search converged.
    pub converged: bool,
    /// The budget exceeded the number of nonzero columns.
    pub budget_exceeds_nonzero: bool,
    /// `(lambda, nonzero count)` for each visited grid point.
    pub path: Vec<(f64, usize)>,
}

const MAX_GRID_STEPS: usize = 100_000;

/// Walks the geometric grid `lambda_floor * ratio^k` upward, warm-starting
/// each solve, and stops at the first penalty whose solution has at most
/// `budget` nonzeros. A short support is then backfilled with the excluded
/// nonzero columns most correlated with the residual, so the returned
/// support always has `min(budget, nonzero columns)` entries.
pub fn lambda_search(system: &WeightedSystem, budget: usize, settings: &SearchSettings) -> Result<SelectionResult> {
    let n = system.cols();
    if budget == 0 || budget > n {
        return Err(Error::invalid(format!("budget {budget} outside 1..={n}")));
    }
    if !(settings.grid_ratio > 1.0) {
        return Err(Error::invalid(format!("grid ratio must exceed 1, got {}", settings.grid_ratio)));
    }
    let lambda_max = system.lambda_max();
    let floor = match settings.lambda_floor {
        Some(f) if f > 0.0 && f.is_finite() => f,
        Some(f) => return Err(Error::invalid(format!("lambda floor must be positive, got {f}"))),
        None if lambda_max > 0.0 => 1e-6 * lambda_max,
        // b is orthogonal to every column: beta = 0 for any penalty.
        None => 1.0,
    };

    let mut beta = vec![0.0; n];
    let mut converged = true;
    let mut path = Vec::new();
    let mut lambda = floor;
    for k in 0..MAX_GRID_STEPS {
        lambda = floor * settings.grid_ratio.powi(k as i32);
        let fit = lasso_coordinate_descent(system, lambda, &beta, settings.max_sweeps, settings.tol)?;
        converged &= fit.converged;
        beta = fit.beta;
        let nnz = beta.iter().filter(|v| **v != 0.0).count();
        path.push((lambda, nnz));
        if nnz <= budget {
            break;
        }
    }
    let last = path.last().map_or(usize::MAX, |p| p.1);
    if last > budget {
        return Err(Error::invalid("penalty search did not reach the budget"));
    }

    let mut support: Vec<usize> = (0..n).filter(|&j| beta[j] != 0.0).collect();
    let nonzero = system.nonzero_columns();
    let target = budget.min(nonzero);
    let mut backfilled = Vec::new();
    if support.len() < target {
        let corr = system.correlations(&beta);
        let mut candidates: Vec<usize> = (0..n)
            .filter(|&j| beta[j] == 0.0 && !system.is_zero_column(j))
            .collect();
        // Stable sort keeps the lower index first among equal correlations.
        candidates.sort_by(|&x, &y| corr[y].abs().total_cmp(&corr[x].abs()));
        backfilled = candidates.into_iter().take(target - support.len()).collect();
        support.extend(&backfilled);
        support.sort_unstable();
        backfilled.sort_unstable();
    }
    let residual_norm = system.residual(&beta).iter().map(|r| r * r).sum::<f64>().sqrt();
    Ok(SelectionResult {
        beta,
        support,
        backfilled,
        lambda_final: lambda,
        lambda_floor: floor,
        residual_norm,
        converged,
        budget_exceeds_nonzero: budget > nonzero,
        path,
    })
}
