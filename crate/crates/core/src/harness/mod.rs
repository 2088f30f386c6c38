//! Experiment driver: configuration, data preparation, and the search /
//! retrain / eval / synth commands with their on-disk artifacts. Every
//! command writes its resolved configuration next to its outputs so any
//! artifact can be regenerated from the directory alone.

pub mod ablate;
pub mod metrics;
pub mod stats;
pub mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{
    ingest, normalize, resample, slice_stack, split, synth_generate, ChannelStats, SlicedSet,
    SplitMode, SynthConfig, TrialSet,
};
use crate::error::Error;
use crate::genotype::{compile, CompileConfig, CompiledNet, Genotype};
use crate::harness::metrics::{evaluate_predictions, predictions, EvalMetrics};
use crate::optim::MomentumSgd;
use crate::search::{run_search, SearchOutcome, SearchRunConfig};
use crate::space::SearchSpace;
use crate::supernet::{ArchParams, MetaNet, MetaNetConfig};
use crate::tensor::nn::cross_entropy;
use crate::Result;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Where trials come from: generated on the fly or read from disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthConfig),
    Path {
        path: PathBuf,
        /// Sample rate to assume for headerless CSV fixtures.
        #[serde(default)]
        csv_rate_hz: Option<f64>,
    },
}

fn default_window() -> usize {
    400
}

fn default_stride() -> usize {
    50
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub split: SplitMode,
    /// Sliding-window length in samples.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Sliding-window step in samples.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Optional resampling target before slicing.
    #[serde(default)]
    pub resample_hz: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth(SynthConfig::default()),
            split: SplitMode::Mixed { ratio: 0.8 },
            window: default_window(),
            stride: default_stride(),
            resample_hz: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Normal+Reduction cell pairs.
    pub blocks: usize,
    /// Intermediate nodes per cell.
    pub nodes: usize,
    /// Checked against the data when set, inferred otherwise.
    #[serde(default)]
    pub channels: Option<usize>,
    #[serde(default)]
    pub classes: Option<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            blocks: 2,
            nodes: 2,
            channels: None,
            classes: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            epochs: 40,
            batch_size: 32,
            lr: 0.01,
            lr_min: 1e-4,
            momentum: 0.9,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_space_id() -> String {
    "desk8".to_string()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/run")
}

/// Everything one experiment needs. The file form is JSON; the resolved
/// form (after seed propagation and bound scaling) is written beside every
/// command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_space_id")]
    pub space_id: String,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub search: SearchRunConfig,
    #[serde(default)]
    pub retrain: RetrainConfig,
    /// Master seed; per-stage seeds derive from it.
    #[serde(default)]
    pub seed: u64,
    /// Rescale the default parameter bounds to the data's channel count.
    #[serde(default = "default_true")]
    pub auto_scale_bounds: bool,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            space_id: default_space_id(),
            arch: ArchConfig::default(),
            search: SearchRunConfig::default(),
            retrain: RetrainConfig::default(),
            seed: 7,
            auto_scale_bounds: true,
            out_dir: default_out_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.blocks == 0 || self.arch.nodes == 0 {
            return Err(Error::Config(
                "architecture needs at least one block and one node".into(),
            ));
        }
        if self.data.window == 0 || self.data.stride == 0 {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        if self.retrain.epochs == 0 || self.retrain.batch_size == 0 {
            return Err(Error::Config(
                "retraining needs positive epochs and batch size".into(),
            ));
        }
        SearchSpace::by_id(&self.space_id)?;
        self.search.validate()
    }

    /// Propagate the master seed and channel-scaled bounds into the search
    /// settings. This is the form written to disk next to run outputs.
    pub fn resolved(&self, channels: usize) -> Self {
        let mut out = self.clone();
        out.search.seed = self.seed;
        if self.auto_scale_bounds {
            let (lo, hi) = crate::search::ConstraintConfig::scaled_bounds(channels);
            out.search.constraint.c_low = lo;
            out.search.constraint.c_high = hi;
        }
        out
    }
}

// Per-stage seeds, derived so stages stay decoupled but reproducible.
fn net_seed(seed: u64) -> u64 {
    seed ^ 0x6E65_7477_6F72_6Bu64
}

fn arch_seed(seed: u64) -> u64 {
    seed ^ 0x6172_6368_7061_72u64
}

fn retrain_seed(seed: u64) -> u64 {
    seed ^ 0x7265_7472_6169_6Eu64
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

/// Sliced, normalized train/val splits plus the statistics and geometry the
/// rest of the pipeline needs.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: SlicedSet,
    pub val: SlicedSet,
    pub stats: ChannelStats,
    pub channels: usize,
    pub classes: usize,
    pub slices: usize,
    pub window: usize,
}

pub fn load_trials(data: &DataConfig) -> Result<TrialSet> {
    let set = match &data.source {
        DataSource::Synth(cfg) => synth_generate(cfg)?,
        DataSource::Path { path, csv_rate_hz } => ingest(path, csv_rate_hz.unwrap_or(250.0))?,
    };
    match data.resample_hz {
        Some(hz) => resample(&set, hz),
        None => Ok(set),
    }
}

/// Full ingest → resample → split → normalize → slice pipeline.
pub fn prepare_data(data: &DataConfig, seed: u64) -> Result<PreparedData> {
    let set = load_trials(data)?;
    if data.window > set.points {
        return Err(Error::Config(format!(
            "window {} exceeds trial length {}",
            data.window, set.points
        )));
    }
    let (train_t, val_t) = split(&set, &data.split, seed)?;
    let (train_t, val_t, stats) = normalize(&train_t, &val_t)?;
    let train = slice_stack(&train_t, data.window, data.stride)?;
    let val = slice_stack(&val_t, data.window, data.stride)?;
    Ok(PreparedData {
        channels: train.channels,
        classes: train.classes,
        slices: train.slices,
        window: train.window,
        train,
        val,
        stats,
    })
}

/// Check the architecture section against the prepared data and build the
/// supernet configuration.
pub fn net_config(cfg: &ExperimentConfig, prepared: &PreparedData) -> Result<MetaNetConfig> {
    if let Some(c) = cfg.arch.channels {
        if c != prepared.channels {
            return Err(Error::Config(format!(
                "config says {c} channels but the data has {}",
                prepared.channels
            )));
        }
    }
    if let Some(k) = cfg.arch.classes {
        if k != prepared.classes {
            return Err(Error::Config(format!(
                "config says {k} classes but the data has {}",
                prepared.classes
            )));
        }
    }
    Ok(MetaNetConfig {
        channels: prepared.channels,
        classes: prepared.classes,
        blocks: cfg.arch.blocks,
        nodes: cfg.arch.nodes,
        input_slices: prepared.slices,
        input_time: prepared.window,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Active-penalty tallies and final penalty values over a search run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenaltySummary {
    pub final_omega_raw: f64,
    pub final_omega_sigma: f64,
    pub final_phi: f64,
    pub final_skip_floor: f64,
    pub lower_active_steps: usize,
    pub upper_active_steps: usize,
    pub sparsity_active_steps: usize,
}

/// What every command leaves behind, serialized as `report.json`. The
/// parameter count always equals the genotype's closed-form count; the
/// numbers here are recomputable from the genotype and trajectory files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub genotype_path: Option<PathBuf>,
    #[serde(default)]
    pub trajectory_path: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    #[serde(default)]
    pub best_accuracy: Option<f64>,
    #[serde(default)]
    pub final_accuracy: Option<f64>,
    #[serde(default)]
    pub kappa: Option<f64>,
    pub param_count: u64,
    pub mac_count: u64,
    pub wall_time_s: f64,
    pub epochs_run: usize,
    pub converged: bool,
    pub constrained: bool,
    pub op_counts: BTreeMap<String, u64>,
    #[serde(default)]
    pub penalties: Option<PenaltySummary>,
    #[serde(default)]
    pub metrics: Option<EvalMetrics>,
}

impl RunReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("report: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("report {}: {e}", path.display())))
    }
}

fn genotype_op_counts(genotype: &Genotype) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for cell in [&genotype.normal, &genotype.reduce] {
        for node in cell {
            for (op, _) in node {
                *counts.entry(op.clone()).or_insert(0) += 1;
            }
        }
    }
    counts
}

fn penalty_summary(outcome: &SearchOutcome<f32>) -> Option<PenaltySummary> {
    let last = outcome.state.penalties.last()?;
    Some(PenaltySummary {
        final_omega_raw: last.omega_raw,
        final_omega_sigma: last.omega_sigma,
        final_phi: last.phi,
        final_skip_floor: last.skip_floor,
        lower_active_steps: outcome
            .state
            .penalties
            .iter()
            .filter(|p| p.lower_active)
            .count(),
        upper_active_steps: outcome
            .state
            .penalties
            .iter()
            .filter(|p| p.upper_active)
            .count(),
        sparsity_active_steps: outcome
            .state
            .penalties
            .iter()
            .filter(|p| p.sparsity_active)
            .count(),
    })
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

fn eval_batches(n: usize, batch: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Argmax predictions of a compiled network over a whole set, in order.
pub fn predict_compiled(
    net: &mut CompiledNet<f32>,
    set: &SlicedSet,
    batch: usize,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(set.len());
    for idx in eval_batches(set.len(), batch) {
        let (x, _) = set.batch::<f32>(&idx)?;
        let logits = net.forward(&x, false)?;
        preds.extend(predictions(&logits)?);
    }
    Ok(preds)
}

/// Argmax predictions of the supernet under its current mixture weights.
pub fn predict_supernet(
    net: &mut MetaNet<f32>,
    arch: &ArchParams<f32>,
    set: &SlicedSet,
    batch: usize,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(set.len());
    for idx in eval_batches(set.len(), batch) {
        let (x, _) = set.batch::<f32>(&idx)?;
        let logits = net.forward(&x, arch, false)?;
        preds.extend(predictions(&logits)?);
    }
    Ok(preds)
}

// ---------------------------------------------------------------------------
// In-memory experiment stages (commands wrap these with I/O)
// ---------------------------------------------------------------------------

/// Build the supernet and architecture parameters for a resolved config.
pub fn build_supernet(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
) -> Result<(MetaNet<f32>, ArchParams<f32>, SearchSpace)> {
    let space = SearchSpace::by_id(&cfg.space_id)?;
    let net_cfg = net_config(cfg, prepared)?;
    let net = MetaNet::new(net_cfg, &space, net_seed(cfg.seed))?;
    let arch = net.init_arch_params(arch_seed(cfg.seed))?;
    let space = net.space.clone();
    Ok((net, arch, space))
}

/// Run the search stage without touching disk. `cfg` must be resolved.
pub fn search_in_memory(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
) -> Result<(MetaNet<f32>, ArchParams<f32>, SearchOutcome<f32>)> {
    let (mut net, arch, _) = build_supernet(cfg, prepared)?;
    let outcome = run_search(&mut net, &arch, &prepared.train, &prepared.val, &cfg.search)?;
    Ok((net, arch, outcome))
}

/// Result of retraining a compiled genotype from scratch.
#[derive(Debug, Clone)]
pub struct TrainedEval {
    pub best_accuracy: f64,
    pub metrics: EvalMetrics,
    /// Per-epoch mean training loss.
    pub train_losses: Vec<f64>,
    /// Per-epoch validation accuracy.
    pub val_accuracies: Vec<f64>,
}

/// Compile and train a genotype from scratch, evaluating after each epoch.
pub fn retrain_in_memory(
    genotype: &Genotype,
    space: &SearchSpace,
    prepared: &PreparedData,
    rcfg: &RetrainConfig,
    seed: u64,
) -> Result<(CompiledNet<f32>, TrainedEval)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    genotype.validate(space)?;
    let ccfg = CompileConfig {
        channels: prepared.channels,
        classes: prepared.classes,
        input_slices: prepared.slices,
        input_time: prepared.window,
    };
    let mut net = compile::<f32>(genotype, space, &ccfg, retrain_seed(seed))?;
    let mut opt = MomentumSgd::new(net.weight_params(), rcfg.lr, rcfg.lr_min, rcfg.momentum);
    let mut best = 0.0f64;
    let mut train_losses = Vec::with_capacity(rcfg.epochs);
    let mut val_accuracies = Vec::with_capacity(rcfg.epochs);
    for epoch in 0..rcfg.epochs {
        opt.set_cosine_lr(epoch, rcfg.epochs);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            retrain_seed(seed) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut idx: Vec<usize> = (0..prepared.train.len()).collect();
        idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in idx.chunks(rcfg.batch_size) {
            let (x, y) = prepared.train.batch::<f32>(chunk)?;
            let logits = net.forward(&x, true)?;
            let loss = cross_entropy(&logits, &y)?;
            let lv = loss.item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: steps,
                    detail: format!("retraining loss became {lv}"),
                });
            }
            loss.backward()?;
            opt.step();
            opt.zero_grads();
            loss_sum += lv as f64;
            steps += 1;
        }
        train_losses.push(loss_sum / steps.max(1) as f64);
        let preds = predict_compiled(&mut net, &prepared.val, rcfg.batch_size)?;
        let acc = metrics::accuracy(&preds, &prepared.val.labels)?;
        val_accuracies.push(acc);
        best = best.max(acc);
    }
    let preds = predict_compiled(&mut net, &prepared.val, rcfg.batch_size)?;
    let final_metrics = evaluate_predictions(&preds, &prepared.val.labels, prepared.classes)?;
    Ok((
        net,
        TrainedEval {
            best_accuracy: best,
            metrics: final_metrics,
            train_losses,
            val_accuracies,
        },
    ))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn write_resolved_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json()?)?;
    Ok(())
}

/// Architecture search: writes `config.json`, `genotype.json`,
/// `trajectory.csv`, and `report.json` into the output directory.
pub fn cmd_search(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let prepared = prepare_data(&cfg.data, cfg.seed)?;
    let cfg = cfg.resolved(prepared.channels);
    cfg.search.validate()?;
    write_resolved_config(&cfg, &cfg.out_dir)?;

    let (mut net, arch, outcome) = search_in_memory(&cfg, &prepared)?;

    let genotype_path = cfg.out_dir.join("genotype.json");
    std::fs::write(&genotype_path, outcome.genotype.to_json())?;
    let trajectory_path = cfg.out_dir.join("trajectory.csv");
    outcome.trajectory.write_csv(&trajectory_path)?;

    // Accounting for the derived architecture.
    let ccfg = CompileConfig {
        channels: prepared.channels,
        classes: prepared.classes,
        input_slices: prepared.slices,
        input_time: prepared.window,
    };
    let param_count = outcome.genotype.count_params(&net.space, &ccfg)?;
    let compiled = compile::<f32>(&outcome.genotype, &net.space, &ccfg, retrain_seed(cfg.seed))?;
    debug_assert_eq!(compiled.param_count(), param_count);
    let mac_count = compiled.count_macs()?;

    // Mixture-level validation accuracy of the searched supernet.
    let preds = predict_supernet(&mut net, &arch, &prepared.val, cfg.search.batch_size)?;
    let final_accuracy = metrics::accuracy(&preds, &prepared.val.labels)?;

    let constrained = !cfg.search.constraint.is_unconstrained();
    let report = RunReport {
        command: "search".into(),
        out_dir: cfg.out_dir.clone(),
        genotype_path: Some(genotype_path),
        trajectory_path: Some(trajectory_path),
        checkpoint_path: None,
        best_accuracy: None,
        final_accuracy: Some(final_accuracy),
        kappa: None,
        param_count,
        mac_count,
        wall_time_s: started.elapsed().as_secs_f64(),
        epochs_run: outcome.epochs_run,
        converged: outcome.converged,
        constrained,
        op_counts: genotype_op_counts(&outcome.genotype),
        penalties: if constrained {
            penalty_summary(&outcome)
        } else {
            None
        },
        metrics: None,
    };
    report.write(&cfg.out_dir.join("report.json"))?;
    Ok(report)
}

/// Retrain a derived genotype from scratch and evaluate it. Writes
/// `config.json`, `checkpoint.ckpt`, and `report.json`.
pub fn cmd_retrain(cfg: &ExperimentConfig, genotype_path: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let genotype = Genotype::from_json(&std::fs::read_to_string(genotype_path)?)?;
    let prepared = prepare_data(&cfg.data, cfg.seed)?;
    let cfg = cfg.resolved(prepared.channels);
    write_resolved_config(&cfg, &cfg.out_dir)?;

    let space = SearchSpace::by_id(&cfg.space_id)?;
    let (net, trained) =
        retrain_in_memory(&genotype, &space, &prepared, &cfg.retrain, cfg.seed)?;

    let ccfg = CompileConfig {
        channels: prepared.channels,
        classes: prepared.classes,
        input_slices: prepared.slices,
        input_time: prepared.window,
    };
    let param_count = genotype.count_params(&space, &ccfg)?;
    let mac_count = net.count_macs()?;
    let checkpoint_path = cfg.out_dir.join("checkpoint.ckpt");
    checkpoint::save(&checkpoint_path, &net.state())?;

    let report = RunReport {
        command: "retrain".into(),
        out_dir: cfg.out_dir.clone(),
        genotype_path: Some(genotype_path.to_path_buf()),
        trajectory_path: None,
        checkpoint_path: Some(checkpoint_path),
        best_accuracy: Some(trained.best_accuracy),
        final_accuracy: Some(trained.metrics.accuracy),
        kappa: Some(trained.metrics.kappa),
        param_count,
        mac_count,
        wall_time_s: started.elapsed().as_secs_f64(),
        epochs_run: cfg.retrain.epochs,
        converged: true,
        constrained: false,
        op_counts: genotype_op_counts(&genotype),
        penalties: None,
        metrics: Some(trained.metrics),
    };
    report.write(&cfg.out_dir.join("report.json"))?;
    Ok(report)
}

/// Evaluate a trained checkpoint of a compiled genotype on the validation
/// split. Writes `config.json` and `report.json`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    genotype_path: &Path,
    checkpoint_path: &Path,
) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let genotype = Genotype::from_json(&std::fs::read_to_string(genotype_path)?)?;
    let prepared = prepare_data(&cfg.data, cfg.seed)?;
    let cfg = cfg.resolved(prepared.channels);
    write_resolved_config(&cfg, &cfg.out_dir)?;

    let space = SearchSpace::by_id(&cfg.space_id)?;
    genotype.validate(&space)?;
    let ccfg = CompileConfig {
        channels: prepared.channels,
        classes: prepared.classes,
        input_slices: prepared.slices,
        input_time: prepared.window,
    };
    let mut net = compile::<f32>(&genotype, &space, &ccfg, retrain_seed(cfg.seed))?;
    net.load_state(&checkpoint::load(checkpoint_path)?)?;
    let preds = predict_compiled(&mut net, &prepared.val, cfg.retrain.batch_size)?;
    let m = evaluate_predictions(&preds, &prepared.val.labels, prepared.classes)?;
    let param_count = genotype.count_params(&space, &ccfg)?;
    let mac_count = net.count_macs()?;

    let report = RunReport {
        command: "eval".into(),
        out_dir: cfg.out_dir.clone(),
        genotype_path: Some(genotype_path.to_path_buf()),
        trajectory_path: None,
        checkpoint_path: Some(checkpoint_path.to_path_buf()),
        best_accuracy: None,
        final_accuracy: Some(m.accuracy),
        kappa: Some(m.kappa),
        param_count,
        mac_count,
        wall_time_s: started.elapsed().as_secs_f64(),
        epochs_run: 0,
        converged: true,
        constrained: false,
        op_counts: genotype_op_counts(&genotype),
        penalties: None,
        metrics: Some(m),
    };
    report.write(&cfg.out_dir.join("report.json"))?;
    Ok(report)
}

/// Generate a synthetic dataset in the native directory format and write
/// the generator settings beside it.
pub fn cmd_synth(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    let set = synth_generate(cfg)?;
    let data_dir = out_dir.join("data");
    crate::data::save_native(&set, &data_dir)?;
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("synth config: {e}")))?;
    std::fs::write(out_dir.join("synth_config.json"), text)?;
    Ok(data_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::stats::{cmd_stats, StatsOptions};
    use crate::search::{PenaltyRecord, Trajectory, TrajectoryRow};

    /// Small synthetic profile that keeps a full search+retrain in seconds.
    fn tiny_config(dir: &Path, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                source: DataSource::Synth(SynthConfig {
                    classes: 2,
                    channels: 4,
                    points: 160,
                    sample_rate_hz: 250.0,
                    trials_per_class: 12,
                    snr_db: 30.0,
                    subjects: 2,
                    seed: 5,
                }),
                split: SplitMode::Mixed { ratio: 0.8 },
                window: 64,
                stride: 32,
                resample_hz: None,
            },
            space_id: "desk8".into(),
            arch: ArchConfig {
                blocks: 1,
                nodes: 1,
                channels: None,
                classes: None,
            },
            search: SearchRunConfig {
                epochs: 2,
                batch_size: 8,
                seed,
                ..Default::default()
            },
            retrain: RetrainConfig {
                epochs: 2,
                batch_size: 8,
                ..Default::default()
            },
            seed,
            auto_scale_bounds: true,
            out_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 3);
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back.seed, 3);
        assert_eq!(back.space_id, "desk8");
        back.validate().unwrap();

        let mut bad = cfg.clone();
        bad.space_id = "nope".into();
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = cfg.clone();
        bad.arch.blocks = 0;
        assert!(bad.validate().is_err());
        // Defaults fill omitted sections.
        let minimal = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(minimal.search.epochs, 30);
        assert_eq!(minimal.data.window, 400);
    }

    #[test]
    fn resolved_config_propagates_seed_and_scales_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 11);
        let resolved = cfg.resolved(11);
        assert_eq!(resolved.search.seed, 11);
        let (lo, hi) = crate::search::ConstraintConfig::scaled_bounds(11);
        assert_eq!(resolved.search.constraint.c_low, lo);
        assert_eq!(resolved.search.constraint.c_high, hi);
        let mut manual = cfg;
        manual.auto_scale_bounds = false;
        manual.search.constraint.c_low = 123.0;
        manual.search.constraint.c_high = 456.0;
        let resolved = manual.resolved(11);
        assert_eq!(resolved.search.constraint.c_low, 123.0);
        assert_eq!(resolved.search.constraint.c_high, 456.0);
    }

    #[test]
    fn prepared_data_geometry_matches_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 1);
        let prepared = prepare_data(&cfg.data, cfg.seed).unwrap();
        assert_eq!(prepared.channels, 4);
        assert_eq!(prepared.classes, 2);
        assert_eq!(prepared.window, 64);
        // (160 - 64) / 32 + 1 slices per trial.
        assert_eq!(prepared.slices, 4);
        // 24 trials at ratio 0.8: 19 train (rounded by class), 5 val.
        assert_eq!(prepared.train.len() + prepared.val.len(), 24);
        // Oversized window is a config error before any compute.
        let mut bad = cfg;
        bad.data.window = 1000;
        assert!(matches!(
            prepare_data(&bad.data, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn search_command_writes_reproducible_artifacts() {
        let root = tempfile::tempdir().unwrap();
        let cfg_a = tiny_config(&root.path().join("a"), 13);
        let cfg_b = tiny_config(&root.path().join("b"), 13);
        let report = cmd_search(&cfg_a).unwrap();
        assert_eq!(report.command, "search");
        assert!(report.constrained);
        assert!(report.penalties.is_some());
        assert_eq!(report.epochs_run, 2);
        assert!(report.final_accuracy.is_some());
        assert!(report.param_count > 0 && report.mac_count > 0);
        for f in ["config.json", "genotype.json", "trajectory.csv", "report.json"] {
            assert!(cfg_a.out_dir.join(f).exists(), "{f} missing");
        }
        // Same config and seed elsewhere: byte-identical genotype.
        cmd_search(&cfg_b).unwrap();
        let ga = std::fs::read(cfg_a.out_dir.join("genotype.json")).unwrap();
        let gb = std::fs::read(cfg_b.out_dir.join("genotype.json")).unwrap();
        assert_eq!(ga, gb);
        let ta = std::fs::read(cfg_a.out_dir.join("trajectory.csv")).unwrap();
        let tb = std::fs::read(cfg_b.out_dir.join("trajectory.csv")).unwrap();
        assert_eq!(ta, tb);

        // The report is recomputable from the on-disk genotype.
        let genotype =
            Genotype::from_json(&std::fs::read_to_string(cfg_a.out_dir.join("genotype.json")).unwrap())
                .unwrap();
        let prepared = prepare_data(&cfg_a.data, cfg_a.seed).unwrap();
        let space = SearchSpace::by_id(&cfg_a.space_id).unwrap();
        let ccfg = CompileConfig {
            channels: prepared.channels,
            classes: prepared.classes,
            input_slices: prepared.slices,
            input_time: prepared.window,
        };
        assert_eq!(genotype.count_params(&space, &ccfg).unwrap(), report.param_count);
        let count_from_report: u64 = report.op_counts.values().sum();
        // One block, one node: two retained inputs per cell, two cells.
        assert_eq!(count_from_report, 4);
    }

    #[test]
    fn unconstrained_search_omits_penalty_summary() {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(&root.path().join("u"), 29);
        cfg.search.constraint.lambda1 = 0.0;
        cfg.search.constraint.lambda2 = 0.0;
        cfg.search.constraint.lambda3 = 0.0;
        let report = cmd_search(&cfg).unwrap();
        assert!(!report.constrained);
        assert!(report.penalties.is_none());
    }

    #[test]
    fn retrain_and_eval_agree_on_the_saved_checkpoint() {
        let root = tempfile::tempdir().unwrap();
        let search_cfg = tiny_config(&root.path().join("s"), 19);
        let s = cmd_search(&search_cfg).unwrap();
        let genotype_path = s.genotype_path.unwrap();

        let retrain_cfg = tiny_config(&root.path().join("r"), 19);
        let r = cmd_retrain(&retrain_cfg, &genotype_path).unwrap();
        assert_eq!(r.command, "retrain");
        assert_eq!(r.param_count, s.param_count);
        assert!(r.best_accuracy.is_some() && r.kappa.is_some());
        let m = r.metrics.as_ref().unwrap();
        assert_eq!(m.samples, 5);
        assert_eq!(
            m.confusion.iter().flatten().sum::<u64>(),
            5
        );
        let ckpt = r.checkpoint_path.clone().unwrap();
        assert!(ckpt.exists());

        let eval_cfg = tiny_config(&root.path().join("e"), 19);
        let e = cmd_eval(&eval_cfg, &genotype_path, &ckpt).unwrap();
        assert_eq!(e.command, "eval");
        assert_eq!(e.final_accuracy, r.final_accuracy);
        assert_eq!(e.kappa, r.kappa);
        assert_eq!(e.param_count, r.param_count);
    }

    #[test]
    fn synth_command_writes_an_ingestable_dataset() {
        let root = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            classes: 2,
            channels: 3,
            points: 100,
            trials_per_class: 4,
            subjects: 2,
            ..Default::default()
        };
        let data_dir = cmd_synth(&cfg, root.path()).unwrap();
        let set = ingest(&data_dir, None.unwrap_or(250.0)).unwrap();
        assert_eq!(set.trials.len(), 8);
        assert_eq!(set.channels, 3);
        assert!(root.path().join("synth_config.json").exists());
    }

    /// Hand-written run directory for stats tests: a report with a known
    /// accuracy and a trajectory where one operator always wins.
    fn fake_run(dir: &Path, accuracy: f64, epochs: usize, winner: &str) {
        std::fs::create_dir_all(dir).unwrap();
        let mut t = Trajectory::default();
        let ops = ["none", "skip", "sep 3x1"];
        let rec = PenaltyRecord {
            omega_sigma: 1.0,
            omega_raw: 500.0,
            phi: 1.2,
            skip_floor: 0.8,
            lower_active: false,
            upper_active: false,
            sparsity_active: false,
        };
        for epoch in 0..epochs {
            for cell in ["normal", "reduce"] {
                for edge in 0..2usize {
                    for op in ops {
                        t.rows.push(TrajectoryRow {
                            epoch,
                            cell_type: cell.to_string(),
                            edge_id: edge,
                            operator_name: op.to_string(),
                            softmax_prob: if op == winner { 0.8 } else { 0.1 },
                            omega_raw: rec.omega_raw,
                            phi: rec.phi,
                            skip_floor: rec.skip_floor,
                            l_train: 1.0,
                            l_val: 1.1,
                            l_lag: 1.2,
                        });
                    }
                }
            }
        }
        t.write_csv(&dir.join("trajectory.csv")).unwrap();
        let report = RunReport {
            command: "retrain".into(),
            out_dir: dir.to_path_buf(),
            genotype_path: None,
            trajectory_path: Some(dir.join("trajectory.csv")),
            checkpoint_path: None,
            best_accuracy: Some(accuracy),
            final_accuracy: Some(accuracy),
            kappa: None,
            param_count: 0,
            mac_count: 0,
            wall_time_s: 0.0,
            epochs_run: epochs,
            converged: false,
            constrained: true,
            op_counts: BTreeMap::new(),
            penalties: None,
            metrics: None,
        };
        report.write(&dir.join("report.json")).unwrap();
    }

    #[test]
    fn stats_counts_follow_the_argmax_and_threshold_rules() {
        let root = tempfile::tempdir().unwrap();
        let good = root.path().join("good");
        let weak = root.path().join("weak");
        fake_run(&good, 0.9, 3, "skip");
        fake_run(&weak, 0.2, 3, "sep 3x1");
        let out = root.path().join("stats");
        let result = cmd_stats(
            &[good.clone(), weak.clone()],
            &out,
            &StatsOptions::default(),
        )
        .unwrap();
        assert_eq!(result.best_accuracy, Some(0.9));
        assert!(result.runs[0].included);
        // 0.2 < 0.9 * 0.9: the degraded run is excluded entirely.
        assert!(!result.runs[1].included);
        // The winner is argmax on 4 edges (both cell types) for 3 epochs.
        assert_eq!(result.total_count("skip"), 12);
        assert_eq!(result.counts["normal"]["skip"], 6);
        assert_eq!(result.counts["reduce"]["skip"], 6);
        assert_eq!(result.total_count("sep 3x1"), 0);
        for f in ["op_counts.csv", "probabilities.csv", "runs.csv", "op_counts.svg"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        // A looser threshold admits both runs.
        let both = cmd_stats(
            &[good, weak],
            &root.path().join("stats2"),
            &StatsOptions { threshold: 0.95 },
        )
        .unwrap();
        assert_eq!(both.total_count("skip"), 12);
        assert_eq!(both.total_count("sep 3x1"), 12);
    }

    #[test]
    fn stats_rejects_empty_input_and_bad_threshold() {
        let root = tempfile::tempdir().unwrap();
        assert!(cmd_stats(&[], root.path(), &StatsOptions::default()).is_err());
        let dir = root.path().join("r");
        fake_run(&dir, 0.5, 1, "skip");
        assert!(cmd_stats(&[dir], root.path(), &StatsOptions { threshold: 1.0 }).is_err());
    }

    #[test]
    fn ablate_grid_and_paired_axes_emit_expected_rows() {
        use crate::harness::ablate::{cmd_ablate, AblateAxis};
        let root = tempfile::tempdir().unwrap();
        let base = tiny_config(&root.path().join("base"), 23);

        let out = cmd_ablate(&base, AblateAxis::Nodes, &[1.0, 2.0], &[], root.path()).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.rows[0].setting, "1");
        assert_eq!(out.rows[1].setting, "2");
        assert!(out.rows.iter().all(|r| r.params > 0));
        assert!(out.csv_path.exists());

        let out = cmd_ablate(&base, AblateAxis::Sparsity, &[], &[23], root.path()).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.rows[0].setting, "sparsity_on");
        assert!(out.rows[0].paired_delta.is_some());
        assert!(out.rows[1].paired_delta.is_none());
        let text = std::fs::read_to_string(&out.csv_path).unwrap();
        assert!(text.starts_with("axis,setting,seed"));

        assert!(cmd_ablate(&base, AblateAxis::Nodes, &[], &[], root.path()).is_err());
        assert!(cmd_ablate(&base, AblateAxis::Batch, &[0.5], &[], root.path()).is_err());
    }
}
