//! `ctnas` — experiment driver for constrained differentiable architecture
//! search on multichannel time series.
//!
//! Subcommands mirror the harness API: `search`, `retrain`, `eval`,
//! `stats`, `ablate`, `synth`. Every command takes `--config <json>` plus
//! flag overrides, and exits 0 on success, 2 on configuration errors, and
//! 3 on numerical divergence.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use ctnas_core::data::{SplitMode, SynthConfig};
use ctnas_core::harness::ablate::{cmd_ablate, AblateAxis};
use ctnas_core::harness::stats::{cmd_stats, StatsOptions};
use ctnas_core::harness::{
    cmd_eval, cmd_retrain, cmd_search, cmd_synth, DataSource, ExperimentConfig, RunReport,
};
use ctnas_core::{threads, Error};

#[derive(Parser)]
#[command(
    name = "ctnas",
    version,
    about = "Constrained architecture search for multichannel time-series classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the bi-level architecture search and derive a genotype.
    Search(ConfigArgs),
    /// Train a derived genotype from scratch and evaluate it.
    Retrain {
        /// Genotype JSON produced by `search`.
        #[arg(long)]
        genotype: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a retrained checkpoint on the validation split.
    Eval {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Aggregate operator statistics and charts across run directories.
    Stats {
        /// Run directories containing report.json and trajectory.csv.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Exclude runs scoring below (1 - threshold) of the best accuracy.
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
    },
    /// Sweep one axis (nodes, batch, scale_constraint, sparsity).
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated numeric settings for grid axes.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic dataset in the native directory format.
    Synth(SynthArgs),
}

/// Experiment configuration: a JSON file plus targeted flag overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config JSON; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for this run's artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed for the whole experiment.
    #[arg(long)]
    seed: Option<u64>,
    /// Data source: "synth" or a dataset path (directory or CSV).
    #[arg(long)]
    data: Option<String>,
    /// Sample rate assumed for CSV inputs.
    #[arg(long)]
    csv_rate: Option<f64>,
    /// Restrict search/training to one subject.
    #[arg(long)]
    subject: Option<String>,
    /// Train fraction of the split.
    #[arg(long)]
    ratio: Option<f64>,
    /// Search-space id (desk8 or full).
    #[arg(long)]
    space: Option<String>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    /// Slicing window length in samples.
    #[arg(long)]
    window: Option<usize>,
    /// Slicing stride in samples.
    #[arg(long)]
    stride: Option<usize>,
    /// Search epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Search batch size.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    /// Explicit lower parameter bound (disables width auto-scaling).
    #[arg(long)]
    c_low: Option<f64>,
    /// Explicit upper parameter bound (disables width auto-scaling).
    #[arg(long)]
    c_high: Option<f64>,
    /// Retraining epochs.
    #[arg(long)]
    retrain_epochs: Option<usize>,
    /// Retraining batch size.
    #[arg(long)]
    retrain_batch: Option<usize>,
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::read(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(data) = &self.data {
            cfg.data.source = if data == "synth" {
                DataSource::Synth(SynthConfig::default())
            } else {
                DataSource::Path {
                    path: PathBuf::from(data),
                    csv_rate_hz: self.csv_rate,
                }
            };
        }
        match (&self.subject, self.ratio) {
            (Some(s), r) => {
                cfg.data.split = SplitMode::SubjectSpecific {
                    subject: s.clone(),
                    ratio: r.unwrap_or(0.8),
                }
            }
            (None, Some(r)) => cfg.data.split = SplitMode::Mixed { ratio: r },
            (None, None) => {}
        }
        if let Some(v) = &self.space {
            cfg.space_id = v.clone();
        }
        if let Some(v) = self.blocks {
            cfg.arch.blocks = v;
        }
        if let Some(v) = self.nodes {
            cfg.arch.nodes = v;
        }
        if let Some(v) = self.window {
            cfg.data.window = v;
        }
        if let Some(v) = self.stride {
            cfg.data.stride = v;
        }
        if let Some(v) = self.epochs {
            cfg.search.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.search.batch_size = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.search.constraint.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.search.constraint.lambda2 = v;
        }
        if let Some(v) = self.lambda3 {
            cfg.search.constraint.lambda3 = v;
        }
        if let Some(v) = self.c_low {
            cfg.search.constraint.c_low = v;
            cfg.auto_scale_bounds = false;
        }
        if let Some(v) = self.c_high {
            cfg.search.constraint.c_high = v;
            cfg.auto_scale_bounds = false;
        }
        if let Some(v) = self.retrain_epochs {
            cfg.retrain.epochs = v;
        }
        if let Some(v) = self.retrain_batch {
            cfg.retrain.batch_size = v;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Generator config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    trials_per_class: Option<usize>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SynthArgs {
    fn build(&self) -> Result<SynthConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| Error::Config(format!("synth config: {e}")))?,
            None => SynthConfig::default(),
        };
        if let Some(v) = self.classes {
            cfg.classes = v;
        }
        if let Some(v) = self.channels {
            cfg.channels = v;
        }
        if let Some(v) = self.points {
            cfg.points = v;
        }
        if let Some(v) = self.rate {
            cfg.sample_rate_hz = v;
        }
        if let Some(v) = self.trials_per_class {
            cfg.trials_per_class = v;
        }
        if let Some(v) = self.snr_db {
            cfg.snr_db = v;
        }
        if let Some(v) = self.subjects {
            cfg.subjects = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        Ok(cfg)
    }
}

fn print_report(report: &RunReport) {
    println!(
        "{}: {} epochs, params {}, MACs {}, {:.1}s",
        report.command, report.epochs_run, report.param_count, report.mac_count,
        report.wall_time_s
    );
    if let Some(acc) = report.final_accuracy {
        match report.kappa {
            Some(k) => println!("accuracy {acc:.4}, kappa {k:.4}"),
            None => println!("accuracy {acc:.4}"),
        }
    }
    if let Some(best) = report.best_accuracy {
        println!("best accuracy {best:.4}");
    }
    if !report.constrained {
        println!("penalties: unconstrained run");
    }
    println!("report: {}", report.out_dir.join("report.json").display());
}

fn run() -> Result<(), Error> {
    threads::init_thread_pool();
    let cli = Cli::parse();
    match cli.command {
        Command::Search(args) => {
            let cfg = args.build()?;
            let report = cmd_search(&cfg)?;
            print_report(&report);
        }
        Command::Retrain { genotype, config } => {
            let cfg = config.build()?;
            let report = cmd_retrain(&cfg, &genotype)?;
            print_report(&report);
        }
        Command::Eval {
            genotype,
            checkpoint,
            config,
        } => {
            let cfg = config.build()?;
            let report = cmd_eval(&cfg, &genotype, &checkpoint)?;
            print_report(&report);
        }
        Command::Stats {
            run_dirs,
            out,
            threshold,
        } => {
            let result = cmd_stats(&run_dirs, &out, &StatsOptions { threshold })?;
            let included = result.runs.iter().filter(|r| r.included).count();
            println!(
                "stats: {} of {} runs included{}",
                included,
                result.runs.len(),
                result
                    .best_accuracy
                    .map_or(String::new(), |b| format!(", best accuracy {b:.4}"))
            );
            for f in &result.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Ablate {
            axis,
            grid,
            seeds,
            out,
            config,
        } => {
            let base = config.build()?;
            let axis = AblateAxis::from_str(&axis)?;
            let outcome = cmd_ablate(&base, axis, &grid, &seeds, &out)?;
            println!("ablate: {} rows", outcome.rows.len());
            println!("wrote {}", outcome.csv_path.display());
        }
        Command::Synth(args) => {
            let cfg = args.build()?;
            let dir = cmd_synth(&cfg, &args.out)?;
            println!(
                "synth: {} classes x {} trials, {} channels, {} points",
                cfg.classes, cfg.trials_per_class, cfg.channels, cfg.points
            );
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
