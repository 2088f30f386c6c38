//! Cross-run aggregation: operator-selection counts under a
//! best-relative inclusion threshold, per-edge probability series, and
//! quick-look charts. Counts are defined purely over the raw trajectory
//! CSVs so an independent recount can verify them exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::harness::svg::{self, Series};
use crate::harness::RunReport;
use crate::search::Trajectory;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsOptions {
    /// Runs scoring below `(1 - threshold) * best accuracy` are excluded.
    pub threshold: f64,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions { threshold: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub accuracy: Option<f64>,
    pub included: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsOutput {
    pub runs: Vec<RunSummary>,
    pub best_accuracy: Option<f64>,
    /// cell type -> operator -> number of (epoch, edge) argmax wins across
    /// included runs.
    pub counts: BTreeMap<String, BTreeMap<String, u64>>,
    pub files: Vec<PathBuf>,
}

impl StatsOutput {
    pub fn total_count(&self, operator: &str) -> u64 {
        self.counts
            .values()
            .map(|m| m.get(operator).copied().unwrap_or(0))
            .sum()
    }
}

/// The accuracy a run is ranked by: best validation accuracy when the run
/// tracked one, otherwise its final accuracy.
fn run_accuracy(report: &RunReport) -> Option<f64> {
    report.best_accuracy.or(report.final_accuracy)
}

/// Per-(epoch, cell, edge) argmax operator; ties resolve to the earlier
/// operator row, matching derivation's low-index preference.
fn argmax_operators(t: &Trajectory) -> Vec<(usize, String, usize, String)> {
    let mut best: BTreeMap<(usize, String, usize), (f64, usize, String)> = BTreeMap::new();
    for (row_idx, r) in t.rows.iter().enumerate() {
        let key = (r.epoch, r.cell_type.clone(), r.edge_id);
        match best.get(&key) {
            Some((p, _, _)) if r.softmax_prob <= *p => {}
            _ => {
                best.insert(key, (r.softmax_prob, row_idx, r.operator_name.clone()));
            }
        }
    }
    best.into_iter()
        .map(|((epoch, cell, edge), (_, _, op))| (epoch, cell, edge, op))
        .collect()
}

fn mean_prob_series(
    trajectories: &[&Trajectory],
) -> BTreeMap<(String, usize, String, usize), (f64, usize)> {
    let mut acc: BTreeMap<(String, usize, String, usize), (f64, usize)> = BTreeMap::new();
    for t in trajectories {
        for r in &t.rows {
            let e = acc
                .entry((
                    r.cell_type.clone(),
                    r.edge_id,
                    r.operator_name.clone(),
                    r.epoch,
                ))
                .or_insert((0.0, 0));
            e.0 += r.softmax_prob;
            e.1 += 1;
        }
    }
    acc
}

/// Aggregate reports and trajectories from `run_dirs` into counts, series,
/// and charts under `out_dir`. Each run directory must contain
/// `report.json` and `trajectory.csv` (from the search command).
pub fn cmd_stats(
    run_dirs: &[PathBuf],
    out_dir: &Path,
    opts: &StatsOptions,
) -> Result<StatsOutput> {
    if run_dirs.is_empty() {
        return Err(Error::Config("stats needs at least one run directory".into()));
    }
    if !(0.0..1.0).contains(&opts.threshold) {
        return Err(Error::Config(format!(
            "stats threshold must be in [0, 1), got {}",
            opts.threshold
        )));
    }
    let mut loaded = Vec::new();
    for dir in run_dirs {
        let report = RunReport::read(&dir.join("report.json"))?;
        let trajectory = Trajectory::read_csv(&dir.join("trajectory.csv"))?;
        loaded.push((dir.clone(), report, trajectory));
    }

    // Global best across the aggregated set; runs without any accuracy are
    // kept only when no run reports one.
    let best_accuracy = loaded
        .iter()
        .filter_map(|(_, r, _)| run_accuracy(r))
        .fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.max(a))));
    let cut = best_accuracy.map(|b| b * (1.0 - opts.threshold));
    let mut runs = Vec::new();
    let mut included_trajectories: Vec<&Trajectory> = Vec::new();
    for (dir, report, trajectory) in &loaded {
        let accuracy = run_accuracy(report);
        let included = match (accuracy, cut) {
            (Some(a), Some(c)) => a >= c,
            (None, Some(_)) => false,
            _ => true,
        };
        if included {
            included_trajectories.push(trajectory);
        }
        runs.push(RunSummary {
            dir: dir.clone(),
            accuracy,
            included,
        });
    }

    let mut counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for t in &included_trajectories {
        for (_, cell, _, op) in argmax_operators(t) {
            *counts.entry(cell).or_default().entry(op).or_insert(0) += 1;
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();

    let mut csv = String::from("cell_type,operator,count\n");
    for (cell, ops) in &counts {
        for (op, n) in ops {
            csv.push_str(&format!("{cell},{op},{n}\n"));
        }
    }
    let counts_path = out_dir.join("op_counts.csv");
    std::fs::write(&counts_path, csv)?;
    files.push(counts_path);

    let series = mean_prob_series(&included_trajectories);
    let mut csv = String::from("cell_type,edge_id,operator,epoch,mean_prob\n");
    for ((cell, edge, op, epoch), (sum, n)) in &series {
        csv.push_str(&format!(
            "{cell},{edge},{op},{epoch},{:?}\n",
            sum / *n as f64
        ));
    }
    let probs_path = out_dir.join("probabilities.csv");
    std::fs::write(&probs_path, csv)?;
    files.push(probs_path);

    let mut csv = String::from("dir,accuracy,included\n");
    for r in &runs {
        csv.push_str(&format!(
            "{},{},{}\n",
            r.dir.display(),
            r.accuracy.map_or(String::new(), |a| format!("{a:?}")),
            r.included
        ));
    }
    let runs_path = out_dir.join("runs.csv");
    std::fs::write(&runs_path, csv)?;
    files.push(runs_path);

    // Charts: combined operator counts, and per-operator mean probability
    // over epochs (edges averaged) for each cell type.
    let mut combined: BTreeMap<String, u64> = BTreeMap::new();
    for ops in counts.values() {
        for (op, n) in ops {
            *combined.entry(op.clone()).or_insert(0) += n;
        }
    }
    let bars: Vec<(String, f64)> = combined
        .iter()
        .map(|(op, n)| (op.clone(), *n as f64))
        .collect();
    let bar_path = out_dir.join("op_counts.svg");
    std::fs::write(
        &bar_path,
        svg::bar_chart("Operator selections across runs", "operator", "count", &bars),
    )?;
    files.push(bar_path);

    for cell in ["normal", "reduce"] {
        // operator -> epoch -> (sum over edges+runs, n)
        let mut per_op: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
        for ((c, _, op, epoch), (sum, n)) in &series {
            if c == cell {
                let e = per_op.entry(op.clone()).or_default().entry(*epoch).or_insert((0.0, 0));
                e.0 += sum;
                e.1 += n;
            }
        }
        let lines: Vec<Series> = per_op
            .into_iter()
            .map(|(op, by_epoch)| Series {
                name: op,
                points: by_epoch
                    .into_iter()
                    .map(|(epoch, (sum, n))| (epoch as f64, sum / n as f64))
                    .collect(),
            })
            .collect();
        if lines.is_empty() {
            continue;
        }
        let path = out_dir.join(format!("prob_{cell}.svg"));
        std::fs::write(
            &path,
            svg::line_chart(
                &format!("Mean operator probability ({cell} cells)"),
                "epoch",
                "softmax probability",
                &lines,
            ),
        )?;
        files.push(path);
    }

    Ok(StatsOutput {
        runs,
        best_accuracy,
        counts,
        files,
    })
}
