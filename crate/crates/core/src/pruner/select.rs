//! Weighted selection systems, channel selection and the weight refit.

use super::config::Variant;
use super::probe::FeatureProbe;
use crate::error::{Error, Result};
use crate::solvers::{lambda_search, least_squares_refit, Matrix, SearchSettings, SelectionResult, WeightedSystem};
use crate::tensor::Tensor;

/// Per-row multiplier `g` and gate `s` of a weighted row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowWeights {
    pub g: f64,
    pub s: f64,
}

impl RowWeights {
    pub fn for_variant(variant: Variant, gamma: f64, grad: f64, ystar: f64) -> Result<Self> {
        let (g, s) = match variant {
            Variant::Cpli => (grad, gamma * ystar),
            Variant::CpliNoFl => (1.0, gamma * ystar),
            Variant::CpliNoFi => (grad, 1.0),
            Variant::CpBaseline => (1.0, 1.0),
            Variant::Magnitude => return Err(Error::invalid("magnitude selection has no weighted system")),
        };
        Ok(RowWeights { g, s })
    }
}

/// One row per (probe, output channel): `b = g * y0`, `A[j] = g * s * z_j`.
pub fn build_weighted_system(probe: &FeatureProbe, variant: Variant, gamma: f64) -> Result<WeightedSystem> {
    let (c_out, c_in) = (probe.site.out_channels, probe.site.in_channels);
    let rows = probe.len() * c_out;
    let mut a = Vec::with_capacity(rows * c_in);
    let mut b = Vec::with_capacity(rows);
    for p in 0..probe.len() {
        for i in 0..c_out {
            let r = p * c_out + i;
            let w = RowWeights::for_variant(variant, gamma, probe.grad[r], probe.ystar[r])?;
            let gs = w.g * w.s;
            b.push(w.g * probe.y0[r]);
            a.extend(probe.contributions(p, i).iter().map(|z| gs * z));
        }
    }
    WeightedSystem::new(Matrix::new(rows, c_in, a)?, b)
}

/// Delegates to the penalty search; a budget covering every channel keeps
/// all of them without solving.
pub fn select_channels(system: &WeightedSystem, budget: usize, settings: &SearchSettings) -> Result<SelectionResult> {
    let n = system.cols();
    if budget == 0 {
        return Err(Error::invalid("channel budget must be at least 1"));
    }
    if budget >= n {
        return Ok(SelectionResult {
            beta: vec![1.0; n],
            support: (0..n).collect(),
            backfilled: Vec::new(),
            lambda_final: 0.0,
            lambda_floor: 0.0,
            residual_norm: system.residual(&vec![1.0; n]).iter().map(|r| r * r).sum::<f64>().sqrt(),
            converged: true,
            budget_exceeds_nonzero: budget > system.nonzero_columns(),
            path: Vec::new(),
        });
    }
    lambda_search(system, budget, settings)
}

/// The `budget` input channels with the largest summed l1 filter norm,
/// lower index first on ties, returned in ascending order.
pub fn magnitude_select(weights: &Tensor, budget: usize) -> Result<Vec<usize>> {
    let (c_out, c_in) = match *weights.dims() {
        [a, b, _, _] => (a, b),
        _ => return Err(Error::shape("conv weight rank", 4, weights.rank())),
    };
    if budget == 0 || budget > c_in {
        return Err(Error::invalid(format!("budget {budget} outside 1..={c_in}")));
    }
    let klen = weights.len() / (c_out * c_in).max(1);
    let norms: Vec<f64> = (0..c_in)
        .map(|j| {
            (0..c_out)
                .map(|i| {
                    let start = (i * c_in + j) * klen;
                    weights.data()[start..start + klen].iter().map(|v| v.abs()).sum::<f64>()
                })
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..c_in).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let mut keep = order[..budget].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Completes `support` to `budget` channels with the lowest unused indices.
/// Needed only when fewer than `budget` columns carry any signal.
pub fn pad_support(support: &[usize], budget: usize, c_in: usize) -> Vec<usize> {
    let mut out = support.to_vec();
    let mut j = 0;
    while out.len() < budget && j < c_in {
        if !out.contains(&j) {
            out.push(j);
        }
        j += 1;
    }
    out.sort_unstable();
    out
}

/// Squared reconstruction error over the probes when layer weights are the
/// originals with channels outside `support` zeroed.
pub fn zero_fill_error(probe: &FeatureProbe, support: &[usize]) -> f64 {
    let c_out = probe.site.out_channels;
    let mut err = 0.0;
    for p in 0..probe.len() {
        for i in 0..c_out {
            let z = probe.contributions(p, i);
            let y: f64 = support.iter().map(|&j| z[j]).sum();
            let d = probe.y0[p * c_out + i] - y;
            err += d * d;
        }
    }
    err
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRefit {
    /// `[c_out, |support|, kh, kw]`.
    pub weights: Tensor,
    /// Bias-free offset added to the original bias: the mean residual of
    /// each output channel.
    pub bias_shift: Vec<f64>,
    /// Squared probe error before the bias shift.
    pub residual_before: f64,
    pub residual_after: f64,
    pub damping: f64,
    pub orthogonal: bool,
    pub orthogonality_ratio: f64,
    /// The least-squares weights were worse than the original ones and were
    /// discarded.
    pub kept_original: bool,
}

/// Least-squares refit of the kept channels' weights against `y0`.
///
/// Patch columns that are zero over every probe are left out of the solve
/// and keep their original weights, which contribute nothing there.
pub fn refit_layer(probe: &FeatureProbe, support: &[usize], original: &Tensor, damping: f64) -> Result<LayerRefit> {
    if support.is_empty() {
        return Err(Error::invalid("cannot refit an empty support"));
    }
    let site = probe.site;
    let (c_out, c_in, klen) = (site.out_channels, site.in_channels, site.kernel_len());
    if support.iter().any(|&j| j >= c_in) {
        return Err(Error::invalid("support index out of range"));
    }
    let rows = probe.len();
    let width = support.len() * klen;
    let mut full = Vec::with_capacity(rows * width);
    for p in 0..rows {
        let patch = probe.patch(p);
        for &j in support {
            full.extend_from_slice(&patch[j * klen..(j + 1) * klen]);
        }
    }
    let active: Vec<usize> = (0..width)
        .filter(|&c| (0..rows).any(|r| full[r * width + c] != 0.0))
        .collect();

    let mut orig_kept = Vec::with_capacity(c_out * width);
    for i in 0..c_out {
        for &j in support {
            let start = (i * c_in + j) * klen;
            orig_kept.extend_from_slice(&original.data()[start..start + klen]);
        }
    }
    let residual_before = zero_fill_error(probe, support);
    let mut weights = orig_kept.clone();
    let mut result = LayerRefit {
        weights: Tensor::zeros(&[0]),
        bias_shift: vec![0.0; c_out],
        residual_before,
        residual_after: residual_before,
        damping,
        orthogonal: true,
        orthogonality_ratio: 0.0,
        kept_original: false,
    };

    if !active.is_empty() && rows > 0 {
        let mut pdata = Vec::with_capacity(rows * active.len());
        for r in 0..rows {
            pdata.extend(active.iter().map(|&c| full[r * width + c]));
        }
        let patches = Matrix::new(rows, active.len(), pdata)?;
        let targets = Matrix::new(rows, c_out, probe.y0.clone())?;
        let fit = least_squares_refit(&patches, &targets, damping, (1, 1))?;
        let after: f64 = fit.residual_sq.iter().sum();
        result.damping = fit.damping;
        result.orthogonal = fit.is_orthogonal();
        result.orthogonality_ratio = fit.worst_orthogonality_ratio();
        if after <= residual_before {
            for i in 0..c_out {
                for (k, &c) in active.iter().enumerate() {
                    weights[i * width + c] = fit.weights.data()[i * active.len() + k];
                }
            }
            result.residual_after = after;
        } else {
            result.kept_original = true;
        }
    }

    for i in 0..c_out {
        let w = &weights[i * width..(i + 1) * width];
        let mut total = 0.0;
        for p in 0..rows {
            let y: f64 = full[p * width..(p + 1) * width].iter().zip(w).map(|(a, b)| a * b).sum();
            total += probe.y0[p * c_out + i] - y;
        }
        result.bias_shift[i] = if rows > 0 { total / rows as f64 } else { 0.0 };
    }
    result.weights = Tensor::new(vec![c_out, support.len(), site.kernel.0, site.kernel.1], weights)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::super::probe::{ConvSite, ProbeLocation};
    use super::*;
    use crate::layers::ConvGeometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Probe with 1x1 kernels so that `z_ij = patch_j * W_ij`.
    fn synthetic_probe(rng: &mut ChaCha8Rng, n: usize, c_out: usize, c_in: usize) -> (FeatureProbe, Tensor) {
        let site = ConvSite {
            position: 2,
            in_channels: c_in,
            out_channels: c_out,
            kernel: (1, 1),
            geom: ConvGeometry::default(),
        };
        let w: Vec<f64> = (0..c_out * c_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let patches: Vec<f64> = (0..n * c_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut z = Vec::new();
        let mut ystar = Vec::new();
        for p in 0..n {
            for i in 0..c_out {
                let mut s = 0.0;
                for j in 0..c_in {
                    let v = patches[p * c_in + j] * w[i * c_in + j];
                    z.push(v);
                    s += v;
                }
                ystar.push(s);
            }
        }
        let y0 = ystar.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
        let grad = (0..n * c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = FeatureProbe {
            site,
            locations: (0..n).map(|p| ProbeLocation { image: p, y: 0, x: 0 }).collect(),
            y0,
            ystar,
            grad,
            z,
            patches,
            locations_clamped: false,
        };
        (probe, Tensor::new(vec![c_out, c_in, 1, 1], w).unwrap())
    }

    #[test]
    fn baseline_rows_are_raw_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (probe, _) = synthetic_probe(&mut rng, 5, 3, 4);
        let sys = build_weighted_system(&probe, Variant::CpBaseline, 1.0).unwrap();
        assert_eq!(sys.target(), probe.y0.as_slice());
        assert_eq!(sys.design().data(), probe.z.as_slice());
    }

    #[test]
    fn baseline_equals_cpli_with_neutral_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (probe, _) = synthetic_probe(&mut rng, 6, 2, 5);
        for gamma in [1.0, 2.0, 0.25] {
            let mut forced = probe.clone();
            forced.grad.fill(1.0);
            forced.ystar.fill(1.0 / gamma);
            let a = build_weighted_system(&probe, Variant::CpBaseline, gamma).unwrap();
            let b = build_weighted_system(&forced, Variant::Cpli, gamma).unwrap();
            assert_eq!(a.design().data(), b.design().data());
            assert_eq!(a.target(), b.target());
        }
    }

    #[test]
    fn zero_gradient_gives_zero_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut probe, _) = synthetic_probe(&mut rng, 3, 2, 3);
        probe.grad[3] = 0.0;
        for variant in [Variant::Cpli, Variant::CpliNoFi] {
            let sys = build_weighted_system(&probe, variant, 1.0).unwrap();
            assert!(sys.design().row(3).iter().all(|&v| v == 0.0));
            assert_eq!(sys.target()[3], 0.0);
        }
        assert!(build_weighted_system(&probe, Variant::Magnitude, 1.0).is_err());
    }

    #[test]
    fn full_budget_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (probe, _) = synthetic_probe(&mut rng, 6, 2, 4);
        let sys = build_weighted_system(&probe, Variant::Cpli, 1.0).unwrap();
        let sel = select_channels(&sys, 4, &SearchSettings::default()).unwrap();
        assert_eq!(sel.support, vec![0, 1, 2, 3]);
        assert_eq!(sel.lambda_final, 0.0);
    }

    #[test]
    fn dead_channel_is_never_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10 {
            let (mut probe, _) = synthetic_probe(&mut rng, 8, 3, 5);
            let dead = trial % 5;
            for p in 0..8 {
                for i in 0..3 {
                    probe.z[(p * 3 + i) * 5 + dead] = 0.0;
                }
            }
            for variant in [Variant::Cpli, Variant::CpBaseline, Variant::CpliNoFl, Variant::CpliNoFi] {
                let sys = build_weighted_system(&probe, variant, 1.0).unwrap();
                for budget in 1..5 {
                    let sel = select_channels(&sys, budget, &SearchSettings::default()).unwrap();
                    assert!(!sel.support.contains(&dead));
                }
            }
        }
    }

    #[test]
    fn magnitude_rules() {
        let mut w = Tensor::filled(&[2, 3, 1, 1], 1.0);
        w.data_mut()[1] = 0.0;
        w.data_mut()[4] = 0.0;
        assert_eq!(magnitude_select(&w, 2).unwrap(), vec![0, 2]);
        let equal = Tensor::filled(&[2, 4, 3, 3], 0.5);
        assert_eq!(magnitude_select(&equal, 2).unwrap(), vec![0, 1]);
        assert!(magnitude_select(&equal, 0).is_err());
        assert!(magnitude_select(&equal, 5).is_err());
    }

    #[test]
    fn magnitude_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (c_out, c_in) = (3, 7);
            let data: Vec<f64> = (0..c_out * c_in * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = Tensor::new(vec![c_out, c_in, 3, 3], data.clone()).unwrap();
            let mut scored: Vec<(f64, usize)> = (0..c_in)
                .map(|j| {
                    let mut s = 0.0;
                    for i in 0..c_out {
                        for k in 0..9 {
                            s += data[(i * c_in + j) * 9 + k].abs();
                        }
                    }
                    (s, j)
                })
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let budget = rng.random_range(1..=c_in);
            let mut expect: Vec<usize> = scored[..budget].iter().map(|s| s.1).collect();
            expect.sort_unstable();
            assert_eq!(magnitude_select(&w, budget).unwrap(), expect);
        }
    }

    #[test]
    fn cpli_and_baseline_disagree_on_hand_example() {
        // Two probes, one output channel, two input channels. Probe 0 has a
        // large response but no loss gradient; probe 1 matters for the loss.
        let site = ConvSite {
            position: 2,
            in_channels: 2,
            out_channels: 1,
            kernel: (1, 1),
            geom: ConvGeometry::default(),
        };
        let probe = FeatureProbe {
            site,
            locations: vec![ProbeLocation { image: 0, y: 0, x: 0 }, ProbeLocation { image: 1, y: 0, x: 0 }],
            y0: vec![4.0, 1.0],
            ystar: vec![4.0, 1.0],
            grad: vec![0.01, 1.0],
            z: vec![4.0, 0.0, 0.0, 1.0],
            patches: vec![4.0, 0.0, 0.0, 1.0],
            locations_clamped: false,
        };
        // Two-subset enumeration of each weighted objective with beta = 1.
        let best = |variant: Variant| {
            let sys = build_weighted_system(&probe, variant, 1.0).unwrap();
            let cost = |j: usize| {
                let mut beta = [0.0; 2];
                beta[j] = 1.0;
                sys.residual(&beta).iter().map(|r| r * r).sum::<f64>()
            };
            if cost(0) <= cost(1) { 0 } else { 1 }
        };
        assert_eq!(best(Variant::CpBaseline), 0);
        assert_eq!(best(Variant::Cpli), 1);
        for (variant, expect) in [(Variant::CpBaseline, 0), (Variant::Cpli, 1)] {
            let sys = build_weighted_system(&probe, variant, 1.0).unwrap();
            let sel = select_channels(&sys, 1, &SearchSettings::default()).unwrap();
            assert_eq!(sel.support, vec![expect]);
        }
    }

    #[test]
    fn refit_never_hurts_and_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (probe, w) = synthetic_probe(&mut rng, 30, 3, 6);
            let support = vec![0, 2, 5];
            let fit = refit_layer(&probe, &support, &w, 0.0).unwrap();
            assert!(fit.residual_after <= fit.residual_before);
            assert!(fit.orthogonal);
            assert_eq!(fit.weights.dims(), &[3, 3, 1, 1]);
        }
    }

    #[test]
    fn consistent_full_system_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut probe, w) = synthetic_probe(&mut rng, 40, 2, 4);
        probe.y0 = probe.ystar.clone();
        let fit = refit_layer(&probe, &[0, 1, 2, 3], &w, 0.0).unwrap();
        for (a, b) in fit.weights.data().iter().zip(w.data()) {
            assert!((a - b).abs() <= 1e-8);
        }
        assert!(fit.residual_after <= 1e-16);
        assert!(fit.bias_shift.iter().all(|b| b.abs() <= 1e-8));
        assert!(refit_layer(&probe, &[], &w, 0.0).is_err());
    }

    #[test]
    fn padding_fills_lowest_free_indices() {
        assert_eq!(pad_support(&[3], 3, 5), vec![0, 1, 3]);
        assert_eq!(pad_support(&[0, 1], 2, 5), vec![0, 1]);
    }
}
