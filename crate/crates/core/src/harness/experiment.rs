use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::HarnessConfig;
use super::data::Splits;
use super::pipeline::{prune_and_finetune, prune_settings, train, CompressionReport, Timings};
use crate::error::{Error, Result};
use crate::model_io::{write_file, Checkpoint};
use crate::pruner::Variant;

/// One run: a variant, a seed, and an optional location-count override.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub seed: u64,
    pub num_locations: Option<usize>,
}

/// Cells are aggregated by (variant, location count) with the mean over
/// seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub cells: Vec<Cell>,
}

impl ExperimentPlan {
    /// Cross product of the configured seeds, variants and location counts.
    pub fn from_config(cfg: &HarnessConfig) -> Self {
        let mut cells = Vec::new();
        for &variant in &cfg.experiment.variants {
            for &m in &cfg.experiment.locations {
                for &seed in &cfg.experiment.seeds {
                    cells.push(Cell {
                        variant,
                        seed,
                        num_locations: Some(m),
                    });
                }
            }
        }
        ExperimentPlan { cells }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub report: CompressionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedValue {
    pub seed: u64,
    pub accuracy_pruned: f64,
    pub accuracy_finetuned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: Variant,
    pub num_locations: usize,
    pub compression_ratio: f64,
    pub accuracy_baseline: f64,
    pub accuracy_pruned: f64,
    pub accuracy_finetuned: f64,
    pub accuracy_drop: f64,
    pub per_seed: Vec<SeedValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<AggregateRow>,
    pub cells: Vec<CellResult>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

impl ExperimentReport {
    /// Groups cells by (variant, locations), in that sort order, with seeds
    /// ascending inside each group.
    pub fn aggregate(mut cells: Vec<CellResult>) -> Self {
        cells.sort_by_key(|c| c.cell);
        let mut groups: BTreeMap<(Variant, usize), Vec<&CellResult>> = BTreeMap::new();
        for c in &cells {
            groups.entry((c.cell.variant, c.report.num_locations)).or_default().push(c);
        }
        let rows = groups
            .into_iter()
            .map(|((variant, num_locations), members)| {
                let fin = |c: &&CellResult| c.report.accuracy_finetuned.unwrap_or(c.report.accuracy_pruned);
                AggregateRow {
                    variant,
                    num_locations,
                    compression_ratio: mean(members.iter().map(|c| c.report.compression_ratio)),
                    accuracy_baseline: mean(members.iter().map(|c| c.report.accuracy_baseline)),
                    accuracy_pruned: mean(members.iter().map(|c| c.report.accuracy_pruned)),
                    accuracy_finetuned: mean(members.iter().map(fin)),
                    accuracy_drop: mean(members.iter().map(|c| fin(c) - c.report.accuracy_baseline)),
                    per_seed: members
                        .iter()
                        .map(|c| SeedValue {
                            seed: c.cell.seed,
                            accuracy_pruned: c.report.accuracy_pruned,
                            accuracy_finetuned: fin(c),
                        })
                        .collect(),
                }
            })
            .collect();
        ExperimentReport { rows, cells }
    }

    pub fn row(&self, variant: Variant, num_locations: usize) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.num_locations == num_locations)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "variant\tnum_locations\tseeds\tcompression_ratio\taccuracy_baseline\taccuracy_pruned\taccuracy_finetuned\taccuracy_drop\tper_seed_finetuned\n",
        );
        for r in &self.rows {
            let per: Vec<String> = r
                .per_seed
                .iter()
                .map(|s| format!("{}:{}", s.seed, s.accuracy_finetuned))
                .collect();
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.variant,
                r.num_locations,
                r.per_seed.len(),
                r.compression_ratio,
                r.accuracy_baseline,
                r.accuracy_pruned,
                r.accuracy_finetuned,
                r.accuracy_drop,
                per.join(",")
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(0, format!("line {} column {}: {e}", e.line(), e.column())))
    }

    /// Writes `experiment.tsv` and `experiment.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("experiment.tsv"), self.to_tsv().as_bytes())?;
        write_file(&dir.join("experiment.json"), self.to_json()?.as_bytes())
    }
}

/// Result of [`run_experiment`]: the report plus per-cell timings.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub baselines: BTreeMap<u64, Checkpoint>,
    pub timings: Vec<(Cell, Timings)>,
}

impl ExperimentRun {
    pub fn timings_tsv(&self) -> String {
        let mut out = String::from("variant\tseed\tnum_locations\ttrain_s\tprune_s\tfinetune_s\n");
        for (c, t) in &self.timings {
            let m = c.num_locations.map_or_else(|| "default".into(), |m| m.to_string());
            writeln!(out, "{}\t{}\t{}\t{:.3}\t{:.3}\t{:.3}", c.variant, c.seed, m, t.train_s, t.prune_s, t.finetune_s)
                .expect("writing to a string");
        }
        out
    }
}

/// Trains one reference model per seed, then prunes and fine-tunes every
/// cell from its seed's reference. Cells are independent, so they run in
/// parallel and are collected in plan order.
pub fn run_experiment(cfg: &HarnessConfig, plan: &ExperimentPlan, splits: &Splits) -> Result<ExperimentRun> {
    if plan.cells.is_empty() {
        return Err(Error::invalid("experiment plan has no cells"));
    }
    let mut seeds: Vec<u64> = plan.cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let trained: Vec<Result<(u64, Checkpoint, f64)>> = seeds
        .par_iter()
        .map(|&seed| {
            let start = Instant::now();
            let ckpt = train(cfg, seed, splits)?;
            Ok((seed, ckpt, start.elapsed().as_secs_f64()))
        })
        .collect();
    let mut baselines = BTreeMap::new();
    let mut train_time = BTreeMap::new();
    for t in trained {
        let (seed, ckpt, secs) = t?;
        log::info!("seed {seed}: reference accuracy {:?}", ckpt.meta.accuracy);
        baselines.insert(seed, ckpt);
        train_time.insert(seed, secs);
    }
    let results: Vec<Result<(CellResult, Timings)>> = plan
        .cells
        .par_iter()
        .map(|&cell| {
            let p = prune_settings(cfg, cell.variant, cell.seed, cell.num_locations, None);
            let (_, report, mut timings) = prune_and_finetune(&baselines[&cell.seed], cfg, &p, splits)?;
            timings.train_s = train_time[&cell.seed];
            log::info!(
                "{} seed {} m={}: pruned {:.2}% finetuned {:?}",
                cell.variant,
                cell.seed,
                p.num_locations,
                report.accuracy_pruned,
                report.accuracy_finetuned
            );
            Ok((CellResult { cell, report }, timings))
        })
        .collect();
    let mut cells = Vec::with_capacity(results.len());
    let mut timings = Vec::with_capacity(results.len());
    for r in results {
        let (c, t) = r?;
        timings.push((c.cell, t));
        cells.push(c);
    }
    Ok(ExperimentRun {
        report: ExperimentReport::aggregate(cells),
        baselines,
        timings,
    })
}
