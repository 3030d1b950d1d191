//! Layer-by-layer channel pruning.
//!
//! Conv layers `2..=L` are visited in order. At each stage the current
//! compressed model (pruned prefix, untouched suffix) is probed, the
//! selection system for the chosen variant is solved for the layer's
//! channel budget, the kept weights are refit and the dropped channels are
//! removed together with the filters of the previous conv that produce them.
//! The first conv and the linear head are never pruned.

mod budget;
mod config;
mod probe;
mod select;
mod trace;

pub use budget::{prunable_widths, pruned_spec, resolve_budget, uniform_budgets, ResolvedBudget};
pub use config::{Budget, PruneConfig, Variant};
pub use probe::{extract_probes, sample_locations, sample_probe_images, ConvSite, FeatureProbe, ProbeLocation};
pub use select::{
    build_weighted_system, magnitude_select, pad_support, refit_layer, select_channels, zero_fill_error, LayerRefit,
    RowWeights,
};
pub use trace::{LayerTrace, PruneTrace};

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::model_io::Dataset;
use crate::network::{LayerParams, Model};
use crate::tensor::Tensor;

/// A stage failed; `trace` holds the stages completed before it.
#[derive(Debug, thiserror::Error)]
#[error("pruning conv layer {layer} failed: {source}")]
pub struct PruneFailure {
    pub layer: usize,
    #[source]
    pub source: Error,
    pub trace: PruneTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub model: Model,
    pub trace: PruneTrace,
    /// Kept input channels of conv layers `2..=L`.
    pub supports: Vec<Vec<usize>>,
    pub budgets: Vec<usize>,
    /// Some feature map had fewer locations than requested.
    pub locations_clamped: bool,
    /// Dataset indices the probes were drawn from.
    pub probe_images: Vec<usize>,
}

/// Keeps the filters `support` of conv `producer` and the matching input
/// channels of conv `consumer`, replacing the consumer's parameters.
fn remove_channels(
    model: &mut Model,
    producer: usize,
    consumer: usize,
    support: &[usize],
    consumer_params: LayerParams,
) -> Result<()> {
    let keep = support.len();
    let p = model.params[producer].as_ref().expect("conv has parameters");
    let c_out = p.weight.dims()[0];
    let filter = p.weight.len() / c_out;
    let mut w = Vec::with_capacity(keep * filter);
    let mut b = Vec::with_capacity(keep);
    for &j in support {
        w.extend_from_slice(&p.weight.data()[j * filter..(j + 1) * filter]);
        b.push(p.bias.data()[j]);
    }
    let mut wdims = p.weight.dims().to_vec();
    wdims[0] = keep;
    model.params[producer] = Some(LayerParams {
        weight: Tensor::new(wdims, w)?,
        bias: Tensor::from_vec(b),
    });
    if let LayerSpec::Conv2d { out_channels, .. } = &mut model.spec.layers[producer] {
        *out_channels = keep;
    }
    if let LayerSpec::Conv2d { in_channels, .. } = &mut model.spec.layers[consumer] {
        *in_channels = keep;
    }
    model.params[consumer] = Some(consumer_params);
    model.validate()
}

/// Columns `support` of a `[c_out, c_in, kh, kw]` weight tensor.
fn slice_inputs(weight: &Tensor, support: &[usize]) -> Result<Tensor> {
    let d = weight.dims();
    let (c_out, c_in, klen) = (d[0], d[1], d[2] * d[3]);
    let mut out = Vec::with_capacity(c_out * support.len() * klen);
    for i in 0..c_out {
        for &j in support {
            let start = (i * c_in + j) * klen;
            out.extend_from_slice(&weight.data()[start..start + klen]);
        }
    }
    Tensor::new(vec![c_out, support.len(), d[2], d[3]], out)
}

/// Applies `supports` (one per conv layer `2..=L`) by deleting channels
/// and keeping every surviving weight as it is.
pub fn zero_fill_prune(model: &Model, supports: &[Vec<usize>]) -> Result<Model> {
    let convs = model.spec.conv_positions();
    if supports.len() + 1 != convs.len() {
        return Err(Error::shape("support count", convs.len().saturating_sub(1), supports.len()));
    }
    let mut out = model.clone();
    for (idx, support) in supports.iter().enumerate() {
        let (producer, consumer) = (convs[idx], convs[idx + 1]);
        let c_in = ConvSite::of(&out, consumer)?.in_channels;
        check_support(support, c_in)?;
        let p = out.params[consumer].as_ref().expect("conv has parameters");
        let params = LayerParams {
            weight: slice_inputs(&p.weight, support)?,
            bias: p.bias.clone(),
        };
        remove_channels(&mut out, producer, consumer, support, params)?;
    }
    Ok(out)
}

fn check_support(support: &[usize], c_in: usize) -> Result<()> {
    if support.is_empty() || support.windows(2).any(|w| w[0] >= w[1]) || support.iter().any(|&j| j >= c_in) {
        return Err(Error::invalid(format!(
            "support {support:?} is not a strictly increasing subset of 0..{c_in}"
        )));
    }
    Ok(())
}

pub fn prune_model(uncompressed: &Model, data: &Dataset, config: &PruneConfig) -> Result<PruneOutcome, PruneFailure> {
    let fail = |layer: usize, trace: &PruneTrace| {
        let trace = trace.clone();
        move |source: Error| PruneFailure { layer, source, trace }
    };
    let empty = PruneTrace::default();
    config.validate().map_err(fail(0, &empty))?;
    uncompressed.validate().map_err(fail(0, &empty))?;
    if data.is_empty() {
        return Err(fail(0, &empty)(Error::invalid("empty probe dataset")));
    }
    let resolved = resolve_budget(&uncompressed.spec, &config.budget).map_err(fail(0, &empty))?;
    let images = sample_probe_images(data.len(), config.probe_images, config.seed);
    let convs = uncompressed.spec.conv_positions();

    let mut comp = uncompressed.clone();
    let mut trace = PruneTrace::default();
    let mut supports = Vec::with_capacity(resolved.budgets.len());
    let mut clamped = false;
    for (idx, &budget) in resolved.budgets.iter().enumerate() {
        let ordinal = idx + 2;
        let (producer, consumer) = (convs[idx], convs[idx + 1]);
        let stage = || -> Result<(LayerTrace, Vec<usize>, LayerParams, bool)> {
            let probe = extract_probes(
                uncompressed,
                &comp,
                consumer,
                data,
                &images,
                config.num_locations,
                config.seed,
            )?;
            let c_in = probe.site.in_channels;
            let original = comp.params[consumer].as_ref().expect("conv has parameters");
            let (support, lambda) = if budget >= c_in {
                ((0..c_in).collect(), 0.0)
            } else if config.variant == Variant::Magnitude {
                (magnitude_select(&original.weight, budget)?, 0.0)
            } else {
                let system = build_weighted_system(&probe, config.variant, config.gamma)?;
                let sel = select_channels(&system, budget, &config.search)?;
                if !sel.converged {
                    log::warn!("conv layer {ordinal}: coordinate descent hit the sweep limit");
                }
                (pad_support(&sel.support, budget, c_in), sel.lambda_final)
            };
            let (params, before, after, damping, ratio) = if config.refit {
                let fit = refit_layer(&probe, &support, &original.weight, config.damping)?;
                if fit.kept_original {
                    log::warn!("conv layer {ordinal}: refit did not improve the probe error");
                }
                let bias: Vec<f64> = original
                    .bias
                    .data()
                    .iter()
                    .zip(&fit.bias_shift)
                    .map(|(b, s)| b + s)
                    .collect();
                (
                    LayerParams {
                        weight: fit.weights,
                        bias: Tensor::from_vec(bias),
                    },
                    fit.residual_before,
                    fit.residual_after,
                    fit.damping,
                    fit.orthogonality_ratio,
                )
            } else {
                let err = zero_fill_error(&probe, &support);
                (
                    LayerParams {
                        weight: slice_inputs(&original.weight, &support)?,
                        bias: original.bias.clone(),
                    },
                    err,
                    err,
                    0.0,
                    0.0,
                )
            };
            let record = LayerTrace {
                layer: ordinal,
                variant: config.variant,
                lambda,
                kept: support.len(),
                total: c_in,
                support: support.clone(),
                residual_before: before,
                residual_after: after,
                damping,
                orthogonality_ratio: ratio,
            };
            log::info!(
                "conv layer {ordinal}: kept {}/{c_in}, probe error {before} -> {after}",
                support.len()
            );
            Ok((record, support, params, probe.locations_clamped))
        };
        let (record, support, params, was_clamped) = stage().map_err(fail(ordinal, &trace))?;
        remove_channels(&mut comp, producer, consumer, &support, params).map_err(fail(ordinal, &trace))?;
        clamped |= was_clamped;
        trace.layers.push(record);
        supports.push(support);
    }
    Ok(PruneOutcome {
        model: comp,
        trace,
        supports,
        budgets: resolved.budgets,
        locations_clamped: clamped,
        probe_images: images,
    })
}
