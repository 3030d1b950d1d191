//! Per-layer keep counts and the structural effect of applying them.

use super::config::Budget;
use crate::error::{Error, Result};
use crate::flops::flops_count;
use crate::layers::LayerSpec;
use crate::network::NetworkSpec;

/// Input-channel counts of conv layers 2..=L.
pub fn prunable_widths(spec: &NetworkSpec) -> Vec<usize> {
    spec.conv_positions()
        .into_iter()
        .skip(1)
        .map(|k| match spec.layers[k] {
            LayerSpec::Conv2d { in_channels, .. } => in_channels,
            _ => unreachable!("conv position"),
        })
        .collect()
}

/// `ceil(fraction * c_in)` per prunable layer, clamped to `1..=c_in`.
pub fn uniform_budgets(spec: &NetworkSpec, keep_fraction: f64) -> Vec<usize> {
    prunable_widths(spec)
        .into_iter()
        .map(|c| ((keep_fraction * c as f64 - 1e-9).ceil() as usize).clamp(1, c))
        .collect()
}

/// Spec after keeping `budgets[l]` input channels of prunable conv `l`
/// (and as many filters of the conv that produces them).
pub fn pruned_spec(spec: &NetworkSpec, budgets: &[usize]) -> Result<NetworkSpec> {
    let convs = spec.conv_positions();
    if budgets.len() + 1 != convs.len() {
        return Err(Error::shape("budget count", convs.len().saturating_sub(1), budgets.len()));
    }
    let mut out = spec.clone();
    for (idx, &keep) in budgets.iter().enumerate() {
        let (prev, cur) = (convs[idx], convs[idx + 1]);
        match &mut out.layers[cur] {
            LayerSpec::Conv2d { in_channels, .. } => {
                if keep == 0 || keep > *in_channels {
                    return Err(Error::invalid(format!(
                        "budget {keep} for conv layer {} outside 1..={in_channels}",
                        idx + 2
                    )));
                }
                *in_channels = keep;
            }
            _ => unreachable!("conv position"),
        }
        if let LayerSpec::Conv2d { out_channels, .. } = &mut out.layers[prev] {
            *out_channels = keep;
        }
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedBudget {
    pub budgets: Vec<usize>,
    /// Predicted FLOPs ratio of the resulting structure.
    pub predicted_ratio: f64,
}

/// Turns a [`Budget`] into keep counts. A FLOPs-ratio target scans keep
/// fractions on a 1e-3 grid and takes the one whose predicted ratio is
/// closest to the target (the larger fraction on ties).
pub fn resolve_budget(spec: &NetworkSpec, budget: &Budget) -> Result<ResolvedBudget> {
    let widths = prunable_widths(spec);
    let base = flops_count(spec)?.total as f64;
    let ratio_of = |b: &[usize]| -> Result<f64> { Ok(base / flops_count(&pruned_spec(spec, b)?)?.total as f64) };
    match budget {
        Budget::Full => Ok(ResolvedBudget {
            budgets: widths,
            predicted_ratio: 1.0,
        }),
        Budget::PerLayer(b) => Ok(ResolvedBudget {
            predicted_ratio: ratio_of(b)?,
            budgets: b.clone(),
        }),
        &Budget::FlopsRatio(target) => {
            let mut best: Option<(f64, ResolvedBudget)> = None;
            for step in (1..=1000).rev() {
                let b = uniform_budgets(spec, step as f64 / 1000.0);
                let r = ratio_of(&b)?;
                let gap = (r - target).abs();
                if best.as_ref().is_none_or(|(g, _)| gap < *g) {
                    best = Some((
                        gap,
                        ResolvedBudget {
                            budgets: b,
                            predicted_ratio: r,
                        },
                    ));
                }
            }
            Ok(best.expect("non-empty scan").1)
        }
    }
}
