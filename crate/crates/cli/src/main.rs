//! `cpli`: train, prune, fine-tune and evaluate small CNNs, and run
//! multi-seed pruning experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cpli::harness::{
    evaluate, finetune, prune, run_experiment, train, CompressionReport, ExperimentPlan, ExperimentReport,
    HarnessConfig, Splits,
};
use cpli::model_io::{load_checkpoint, save_checkpoint};
use cpli::pruner::{Budget, Variant};

#[derive(Parser)]
#[command(name = "cpli", version, about = "Channel pruning for small convolutional networks")]
struct Cli {
    /// TOML configuration file; built-in defaults are used without one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialisation, shuffling and probe sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Selection criterion: cpli, cpli_no_fl, cpli_no_fi, cp_baseline or magnitude.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Target FLOPs compression ratio (before / after).
    #[arg(long, global = true)]
    cr: Option<f64>,
    /// Sampled spatial locations per probe image.
    #[arg(long, global = true)]
    locations: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference network from scratch.
    Train,
    /// Prune a trained checkpoint.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Continue training a (pruned) checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `test` or `train`.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train per seed, then prune and fine-tune every (variant, locations, seed) cell.
    Experiment,
    /// Print a saved JSON report as a table.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
    /// Print the effective configuration as TOML.
    Config,
}

impl Cli {
    fn config(&self) -> Result<HarnessConfig> {
        let mut cfg = match &self.config {
            Some(path) => HarnessConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => HarnessConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.prune.seed = seed;
            cfg.experiment.seeds = vec![seed];
        }
        if let Some(v) = self.variant {
            cfg.prune.variant = v;
            cfg.experiment.variants = vec![v];
        }
        if let Some(cr) = self.cr {
            cfg.prune.budget = Budget::FlopsRatio(cr);
        }
        if let Some(m) = self.locations {
            cfg.prune.num_locations = m;
            cfg.experiment.locations = vec![m];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.config()?;
    match &cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml()?);
        }
        Command::Train => {
            let splits = Splits::load(&cfg.data)?;
            let start = Instant::now();
            let ckpt = train(&cfg, cfg.seed, &splits)?;
            let path = cli.out.join("model.ckpt");
            save_checkpoint(&path, &ckpt)?;
            let acc = ckpt.meta.accuracy.unwrap_or(f64::NAN) * 100.0;
            println!("accuracy\t{acc}");
            println!("checkpoint\t{}", path.display());
            log::info!("trained in {:.1}s", start.elapsed().as_secs_f64());
        }
        Command::Prune { checkpoint } => {
            let splits = Splits::load(&cfg.data)?;
            let ckpt = load_checkpoint(checkpoint)?;
            let mut pcfg = cfg.prune.clone();
            pcfg.seed = cfg.seed;
            let (pruned, report) = prune(&ckpt, &pcfg, &splits)?;
            save_checkpoint(&cli.out.join("pruned.ckpt"), &pruned)?;
            write(&cli.out, "report.tsv", &report.to_tsv())?;
            write(&cli.out, "report.json", &report.to_json()?)?;
            write(&cli.out, "trace.tsv", &report.trace.to_tsv())?;
            print!("{}", report.to_tsv());
        }
        Command::Finetune { checkpoint } => {
            let splits = Splits::load(&cfg.data)?;
            let ckpt = load_checkpoint(checkpoint)?;
            let before = evaluate(&ckpt, &splits.test)? * 100.0;
            let tuned = finetune(&ckpt, &cfg.finetune, cfg.seed, &splits)?;
            let after = evaluate(&tuned, &splits.test)? * 100.0;
            save_checkpoint(&cli.out.join("finetuned.ckpt"), &tuned)?;
            println!("accuracy_before\t{before}");
            println!("accuracy_after\t{after}");
        }
        Command::Eval { checkpoint, split } => {
            let splits = Splits::load(&cfg.data)?;
            let ckpt = load_checkpoint(checkpoint)?;
            let data = match split.as_str() {
                "test" => &splits.test,
                "train" => &splits.train,
                other => bail!("unknown split {other:?} (expected test or train)"),
            };
            println!("accuracy\t{}", evaluate(&ckpt, data)? * 100.0);
        }
        Command::Experiment => {
            let splits = Splits::load(&cfg.data)?;
            let plan = ExperimentPlan::from_config(&cfg);
            let run = run_experiment(&cfg, &plan, &splits)?;
            run.report.write(&cli.out)?;
            write(&cli.out, "timings.tsv", &run.timings_tsv())?;
            print!("{}", run.report.to_tsv());
        }
        Command::Report { input } => {
            let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            if let Ok(r) = ExperimentReport::from_json(&text) {
                print!("{}", r.to_tsv());
            } else {
                let r = CompressionReport::from_json(&text)
                    .with_context(|| format!("{} is neither an experiment nor a compression report", input.display()))?;
                print!("{}", r.to_tsv());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cpli: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
