use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{HarnessConfig, TrainConfig};
use super::data::{normalize_for, Splits};
use super::train::{accuracy, sgd_train};
use crate::error::{Error, Result};
use crate::flops::{flops_count, FlopsReport};
use crate::layers::LayerSpec;
use crate::model_io::{Checkpoint, Dataset, Metadata};
use crate::network::{Model, NetworkSpec};
use crate::pruner::{prune_model, zero_fill_prune, Budget, PruneConfig, PruneTrace, Variant};

/// Builds the configured network for the given data shape.
pub fn network_spec(cfg: &HarnessConfig, splits: &Splits) -> Result<NetworkSpec> {
    let dims = splits.train.image_dims();
    let dims: [usize; 3] = dims
        .try_into()
        .map_err(|_| Error::shape("image rank", 3, dims.len()))?;
    NetworkSpec::conv_stack(dims, &cfg.network.channels, &cfg.network.pool_after, splits.train.num_classes)
}

/// Trains the reference network from scratch. Zero epochs returns the
/// initialisation.
pub fn train(cfg: &HarnessConfig, seed: u64, splits: &Splits) -> Result<Checkpoint> {
    let spec = network_spec(cfg, splits)?;
    let mut model = Model::init(spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let (pixel_mean, pixel_std) = if cfg.data.normalize {
        let (mean, std) = splits.train.pixel_stats();
        (Some(mean), Some(if std > 0.0 { std } else { 1.0 }))
    } else {
        (None, None)
    };
    let meta = Metadata {
        seed,
        epochs: cfg.train.epochs,
        dataset: splits.train.split.clone(),
        accuracy: None,
        pixel_mean,
        pixel_std,
        note: "trained".into(),
    };
    let train = normalize_for(&meta, &splits.train)?;
    sgd_train(&mut model, &train, &cfg.train, seed)?;
    let mut ckpt = Checkpoint::new(model, meta);
    ckpt.meta.accuracy = Some(evaluate(&ckpt, &splits.test)?);
    Ok(ckpt)
}

/// Top-1 accuracy of a checkpoint on a raw split.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset) -> Result<f64> {
    accuracy(&ckpt.model, &normalize_for(&ckpt.meta, data)?)
}

/// Resumes SGD on a (typically pruned) checkpoint.
pub fn finetune(ckpt: &Checkpoint, cfg: &TrainConfig, seed: u64, splits: &Splits) -> Result<Checkpoint> {
    let mut out = ckpt.clone();
    if cfg.epochs == 0 {
        return Ok(out);
    }
    let train = normalize_for(&ckpt.meta, &splits.train)?;
    sgd_train(&mut out.model, &train, cfg, seed)?;
    out.meta.epochs += cfg.epochs;
    out.meta.accuracy = Some(evaluate(&out, &splits.test)?);
    out.meta.note = "finetuned".into();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    /// Position in the layer list.
    pub index: usize,
    pub kind: String,
    /// Input channels (or features) kept and originally present.
    pub kept: usize,
    pub total: usize,
    pub flops_before: u64,
    pub flops_after: u64,
}

/// Outcome of one prune (and optional fine-tune) run. Accuracies are in
/// percent; `accuracy_drop` is `finetuned - baseline`, so a positive value
/// is an improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub variant: Variant,
    pub seed: u64,
    pub num_locations: usize,
    pub budgets: Vec<usize>,
    pub layers: Vec<LayerReport>,
    pub flops_before: u64,
    pub flops_after: u64,
    pub compression_ratio: f64,
    pub accuracy_baseline: f64,
    pub accuracy_pruned: f64,
    pub accuracy_finetuned: Option<f64>,
    pub accuracy_drop: Option<f64>,
    /// Pre-fine-tune accuracy of the same supports without the refit.
    pub accuracy_zero_fill: Option<f64>,
    pub locations_clamped: bool,
    pub trace: PruneTrace,
}

impl CompressionReport {
    pub fn set_finetuned(&mut self, accuracy_pct: f64) {
        self.accuracy_finetuned = Some(accuracy_pct);
        self.accuracy_drop = Some(accuracy_pct - self.accuracy_baseline);
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(0, format!("line {} column {}: {e}", e.line(), e.column())))
    }

    /// Line-oriented summary: one `key\tvalue` line per scalar, then one
    /// row per layer.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let mut out = String::new();
        for (k, v) in [
            ("variant", self.variant.to_string()),
            ("seed", self.seed.to_string()),
            ("num_locations", self.num_locations.to_string()),
            ("flops_before", self.flops_before.to_string()),
            ("flops_after", self.flops_after.to_string()),
            ("compression_ratio", self.compression_ratio.to_string()),
            ("accuracy_baseline", self.accuracy_baseline.to_string()),
            ("accuracy_pruned", self.accuracy_pruned.to_string()),
            ("accuracy_zero_fill", opt(self.accuracy_zero_fill)),
            ("accuracy_finetuned", opt(self.accuracy_finetuned)),
            ("accuracy_drop", opt(self.accuracy_drop)),
            ("locations_clamped", self.locations_clamped.to_string()),
        ] {
            out.push_str(&format!("{k}\t{v}\n"));
        }
        out.push_str("layer\tkind\tkept\ttotal\tflops_before\tflops_after\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                l.index, l.kind, l.kept, l.total, l.flops_before, l.flops_after
            ));
        }
        out
    }
}

fn layer_reports(before: &NetworkSpec, after: &NetworkSpec, fb: &FlopsReport, fa: &FlopsReport) -> Vec<LayerReport> {
    before
        .layers
        .iter()
        .zip(&after.layers)
        .enumerate()
        .filter_map(|(k, (lb, la))| {
            let (kind, total, kept) = match (lb, la) {
                (LayerSpec::Conv2d { in_channels: t, .. }, LayerSpec::Conv2d { in_channels: a, .. }) => ("conv2d", *t, *a),
                (LayerSpec::Linear { in_features: t, .. }, LayerSpec::Linear { in_features: a, .. }) => ("linear", *t, *a),
                _ => return None,
            };
            Some(LayerReport {
                index: k,
                kind: kind.into(),
                kept,
                total,
                flops_before: fb.per_layer[k],
                flops_after: fa.per_layer[k],
            })
        })
        .collect()
}

/// Wall-clock seconds per phase; kept out of the reports so that those stay
/// reproducible byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_s: f64,
    pub prune_s: f64,
    pub finetune_s: f64,
}

/// Prunes `ckpt` with probes from the training split and evaluates the
/// result (and a no-refit copy with the same supports) on the test split.
pub fn prune(ckpt: &Checkpoint, cfg: &PruneConfig, splits: &Splits) -> Result<(Checkpoint, CompressionReport)> {
    let train = normalize_for(&ckpt.meta, &splits.train)?;
    let test = normalize_for(&ckpt.meta, &splits.test)?;
    let outcome = prune_model(&ckpt.model, &train, cfg).map_err(|f| {
        log::error!("pruning stopped after {} completed stages", f.trace.layers.len());
        f.source
    })?;
    let fb = flops_count(&ckpt.model.spec)?;
    let fa = flops_count(&outcome.model.spec)?;
    let zero_fill = zero_fill_prune(&ckpt.model, &outcome.supports)?;
    let baseline = accuracy(&ckpt.model, &test)? * 100.0;
    let pruned = accuracy(&outcome.model, &test)? * 100.0;
    let report = CompressionReport {
        variant: cfg.variant,
        seed: cfg.seed,
        num_locations: cfg.num_locations,
        budgets: outcome.budgets.clone(),
        layers: layer_reports(&ckpt.model.spec, &outcome.model.spec, &fb, &fa),
        flops_before: fb.total,
        flops_after: fa.total,
        compression_ratio: fb.total as f64 / fa.total as f64,
        accuracy_baseline: baseline,
        accuracy_pruned: pruned,
        accuracy_finetuned: None,
        accuracy_drop: None,
        accuracy_zero_fill: Some(accuracy(&zero_fill, &test)? * 100.0),
        locations_clamped: outcome.locations_clamped,
        trace: outcome.trace,
    };
    let meta = Metadata {
        accuracy: Some(pruned / 100.0),
        note: format!("pruned:{}", cfg.variant),
        ..ckpt.meta.clone()
    };
    Ok((Checkpoint::new(outcome.model, meta), report))
}

/// Prune then fine-tune one cell; returns the final checkpoint, report and
/// phase timings.
pub fn prune_and_finetune(
    base: &Checkpoint,
    cfg: &HarnessConfig,
    prune_cfg: &PruneConfig,
    splits: &Splits,
) -> Result<(Checkpoint, CompressionReport, Timings)> {
    let start = Instant::now();
    let (pruned, mut report) = prune(base, prune_cfg, splits)?;
    let prune_s = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let tuned = finetune(&pruned, &cfg.finetune, prune_cfg.seed, splits)?;
    let finetune_s = start.elapsed().as_secs_f64();
    report.set_finetuned(evaluate(&tuned, &splits.test)? * 100.0);
    Ok((
        tuned,
        report,
        Timings {
            train_s: 0.0,
            prune_s,
            finetune_s,
        },
    ))
}

/// Convenience: the prune settings of `cfg` with a variant, seed, location
/// count and FLOPs target substituted.
pub fn prune_settings(
    cfg: &HarnessConfig,
    variant: Variant,
    seed: u64,
    num_locations: Option<usize>,
    cr: Option<f64>,
) -> PruneConfig {
    let mut p = cfg.prune.clone();
    p.variant = variant;
    p.seed = seed;
    if let Some(m) = num_locations {
        p.num_locations = m;
    }
    if let Some(r) = cr {
        p.budget = Budget::FlopsRatio(r);
    }
    p
}
