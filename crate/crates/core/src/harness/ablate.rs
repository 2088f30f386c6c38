//! Grid ablations over architecture and constraint settings. Each run is a
//! full search (plus a short retrain for accuracy) at desk scale; the
//! output is one CSV row per (setting, seed) with paired columns for
//! on/off axes.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::genotype::CompileConfig;
use crate::harness::{prepare_data, retrain_in_memory, search_in_memory, ExperimentConfig};
use crate::search::SearchOutcome;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblateAxis {
    /// Intermediate nodes per cell.
    Nodes,
    /// Search batch size.
    Batch,
    /// Parameter-scale bounds on vs. off, paired by seed.
    ScaleConstraint,
    /// Skip-floor penalty on vs. off, paired by seed.
    Sparsity,
}

impl FromStr for AblateAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nodes" => Ok(AblateAxis::Nodes),
            "batch" => Ok(AblateAxis::Batch),
            "scale_constraint" => Ok(AblateAxis::ScaleConstraint),
            "sparsity" => Ok(AblateAxis::Sparsity),
            other => Err(Error::Config(format!(
                "unknown ablation axis '{other}' (nodes, batch, scale_constraint, sparsity)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateRow {
    pub axis: String,
    pub setting: String,
    pub seed: u64,
    pub accuracy: f64,
    pub params: u64,
    /// Mean Φ over the first fifth of the search epochs.
    pub phi_early_mean: f64,
    /// Population variance of the per-epoch validation loss over the same
    /// early window.
    pub val_loss_var_early: f64,
    /// For paired axes: this row's value minus its partner's (params for
    /// the scale axis, early validation-loss variance for sparsity).
    #[serde(default)]
    pub paired_delta: Option<f64>,
}

pub const ABLATE_HEADER: &str =
    "axis,setting,seed,accuracy,params,phi_early_mean,val_loss_var_early,paired_delta";

#[derive(Debug, Clone)]
pub struct AblateOutcome {
    pub rows: Vec<AblateRow>,
    pub csv_path: PathBuf,
}

pub fn rows_to_csv(rows: &[AblateRow]) -> String {
    let mut out = String::from(ABLATE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:?},{},{:?},{:?},{}\n",
            r.axis,
            r.setting,
            r.seed,
            r.accuracy,
            r.params,
            r.phi_early_mean,
            r.val_loss_var_early,
            r.paired_delta.map_or(String::new(), |d| format!("{d:?}")),
        ));
    }
    out
}

/// Number of leading epochs forming the "early" window: a fifth of the
/// budget, at least one.
pub fn early_window(epochs: usize) -> usize {
    (epochs / 5).max(1)
}

pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Early-epoch summaries read off a finished search.
fn early_summaries(outcome: &SearchOutcome<f32>) -> (f64, f64) {
    let w = early_window(outcome.epochs_run.max(1)).min(outcome.epochs_run.max(1));
    // One Φ value per epoch: every trajectory row of an epoch repeats it.
    let mut phis = Vec::with_capacity(w);
    for epoch in 0..w {
        if let Some(r) = outcome.trajectory.rows.iter().find(|r| r.epoch == epoch) {
            phis.push(r.phi);
        }
    }
    let phi_mean = if phis.is_empty() {
        0.0
    } else {
        phis.iter().sum::<f64>() / phis.len() as f64
    };
    let val_losses: Vec<f64> = outcome
        .state
        .losses
        .iter()
        .take(w)
        .map(|l| l.l_val)
        .collect();
    (phi_mean, population_variance(&val_losses))
}

/// One search + short retrain under a variant config.
fn run_variant(cfg: &ExperimentConfig, axis: &str, setting: &str) -> Result<AblateRow> {
    let prepared = prepare_data(&cfg.data, cfg.seed)?;
    let cfg = cfg.resolved(prepared.channels);
    cfg.validate()?;
    let (net, _, outcome) = search_in_memory(&cfg, &prepared)?;
    let ccfg = CompileConfig {
        channels: prepared.channels,
        classes: prepared.classes,
        input_slices: prepared.slices,
        input_time: prepared.window,
    };
    let params = outcome.genotype.count_params(&net.space, &ccfg)?;
    let (_, trained) =
        retrain_in_memory(&outcome.genotype, &net.space, &prepared, &cfg.retrain, cfg.seed)?;
    let (phi_early_mean, val_loss_var_early) = early_summaries(&outcome);
    Ok(AblateRow {
        axis: axis.to_string(),
        setting: setting.to_string(),
        seed: cfg.seed,
        accuracy: trained.metrics.accuracy,
        params,
        phi_early_mean,
        val_loss_var_early,
        paired_delta: None,
    })
}

/// Run the grid for `axis` and write `ablate_<axis>.csv` under `out_dir`.
///
/// `grid` carries the numeric settings for the `nodes` and `batch` axes and
/// is ignored by the paired on/off axes. Paired axes run both arms with the
/// same seed and populate `paired_delta` on the "on" row.
pub fn cmd_ablate(
    base: &ExperimentConfig,
    axis: AblateAxis,
    grid: &[f64],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<AblateOutcome> {
    base.validate()?;
    let seeds: Vec<u64> = if seeds.is_empty() {
        vec![base.seed]
    } else {
        seeds.to_vec()
    };
    let mut rows = Vec::new();
    match axis {
        AblateAxis::Nodes | AblateAxis::Batch => {
            if grid.is_empty() {
                return Err(Error::Config("this ablation axis needs a grid".into()));
            }
            let name = if axis == AblateAxis::Nodes { "nodes" } else { "batch" };
            for &g in grid {
                if g < 1.0 || g.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "{name} grid values must be positive integers, got {g}"
                    )));
                }
                let v = g as usize;
                for &seed in &seeds {
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    match axis {
                        AblateAxis::Nodes => cfg.arch.nodes = v,
                        _ => cfg.search.batch_size = v,
                    }
                    rows.push(run_variant(&cfg, name, &v.to_string())?);
                }
            }
        }
        AblateAxis::ScaleConstraint => {
            for &seed in &seeds {
                let mut on = base.clone();
                on.seed = seed;
                let mut off = base.clone();
                off.seed = seed;
                off.search.constraint.lambda1 = 0.0;
                off.search.constraint.lambda2 = 0.0;
                let mut row_on = run_variant(&on, "scale_constraint", "constrained")?;
                let row_off = run_variant(&off, "scale_constraint", "unconstrained")?;
                row_on.paired_delta = Some(row_on.params as f64 - row_off.params as f64);
                rows.push(row_on);
                rows.push(row_off);
            }
        }
        AblateAxis::Sparsity => {
            for &seed in &seeds {
                let mut on = base.clone();
                on.seed = seed;
                let mut off = base.clone();
                off.seed = seed;
                off.search.constraint.lambda3 = 0.0;
                let mut row_on = run_variant(&on, "sparsity", "sparsity_on")?;
                let row_off = run_variant(&off, "sparsity", "sparsity_off")?;
                row_on.paired_delta =
                    Some(row_on.val_loss_var_early - row_off.val_loss_var_early);
                rows.push(row_on);
                rows.push(row_off);
            }
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let axis_name = match axis {
        AblateAxis::Nodes => "nodes",
        AblateAxis::Batch => "batch",
        AblateAxis::ScaleConstraint => "scale_constraint",
        AblateAxis::Sparsity => "sparsity",
    };
    let csv_path = out_dir.join(format!("ablate_{axis_name}.csv"));
    std::fs::write(&csv_path, rows_to_csv(&rows))?;
    Ok(AblateOutcome { rows, csv_path })
}
