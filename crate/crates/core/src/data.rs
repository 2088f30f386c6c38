//! Trial ingestion, resampling, normalization, sliding-window stacking,
//! subject-aware splitting, and a synthetic multichannel generator for
//! desk-scale experiments.
//!
//! A trial is a `channels x points` recording with a class label and a
//! subject id. The native on-disk format is a directory holding `meta.json`
//! plus one little-endian f32 binary per trial (row-major `C x P`); a CSV
//! encoding with header `subject,label,ch0_t0,...` is accepted for fixtures.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tensor::{Elem, Tensor};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub subject: String,
    pub label: usize,
    /// Row-major `channels x points` samples, microvolt scale.
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub channels: usize,
    pub points: usize,
    pub sample_rate_hz: f64,
    pub classes: usize,
    pub channel_names: Vec<String>,
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.points == 0 {
            return Err(Error::Data(format!(
                "trial set needs positive dimensions, got {} channels x {} points",
                self.channels, self.points
            )));
        }
        if self.sample_rate_hz <= 0.0 || !self.sample_rate_hz.is_finite() {
            return Err(Error::Data(format!(
                "bad sample rate {} Hz",
                self.sample_rate_hz
            )));
        }
        if self.classes < 1 {
            return Err(Error::Data("trial set declares no classes".into()));
        }
        if self.channel_names.len() != self.channels {
            return Err(Error::Data(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.channels
            )));
        }
        for (i, t) in self.trials.iter().enumerate() {
            if t.data.len() != self.channels * self.points {
                return Err(Error::Data(format!(
                    "trial {i} has {} samples, expected {}",
                    t.data.len(),
                    self.channels * self.points
                )));
            }
            if t.label >= self.classes {
                return Err(Error::Data(format!(
                    "trial {i} has label {} outside [0, {})",
                    t.label, self.classes
                )));
            }
            if let Some(j) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "trial {i} contains a non-finite sample at offset {j}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in &self.trials {
            if seen.insert(t.subject.clone()) {
                out.push(t.subject.clone());
            }
        }
        out
    }
}

fn default_channel_names(channels: usize) -> Vec<String> {
    (0..channels).map(|c| format!("ch{c}")).collect()
}

// ---------------------------------------------------------------------------
// Native directory format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MetaTrial {
    file: String,
    subject: String,
    label: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaFile {
    channels: usize,
    points: usize,
    sample_rate_hz: f64,
    classes: usize,
    channel_names: Vec<String>,
    trials: Vec<MetaTrial>,
}

pub fn save_native(set: &TrialSet, dir: &Path) -> Result<()> {
    set.validate()?;
    fs::create_dir_all(dir)?;
    let mut metas = Vec::with_capacity(set.trials.len());
    for (i, t) in set.trials.iter().enumerate() {
        let file = format!("trial_{i:05}.bin");
        let mut bytes = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        metas.push(MetaTrial {
            file,
            subject: t.subject.clone(),
            label: t.label,
        });
    }
    let meta = MetaFile {
        channels: set.channels,
        points: set.points,
        sample_rate_hz: set.sample_rate_hz,
        classes: set.classes,
        channel_names: set.channel_names.clone(),
        trials: metas,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn ingest_native(dir: &Path) -> Result<TrialSet> {
    let meta_path = dir.join("meta.json");
    let meta: MetaFile = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| {
        Error::Data(format!("cannot read {}: {e}", meta_path.display()))
    })?)?;
    let mut trials = Vec::with_capacity(meta.trials.len());
    for (i, mt) in meta.trials.iter().enumerate() {
        let bytes = fs::read(dir.join(&mt.file))
            .map_err(|e| Error::Data(format!("trial {i} ({}): {e}", mt.file)))?;
        let want = meta.channels * meta.points * 4;
        if bytes.len() != want {
            return Err(Error::Data(format!(
                "trial {i} ({}) holds {} bytes, expected {want}",
                mt.file,
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        trials.push(Trial {
            subject: mt.subject.clone(),
            label: mt.label,
            data,
        });
    }
    let set = TrialSet {
        channels: meta.channels,
        points: meta.points,
        sample_rate_hz: meta.sample_rate_hz,
        classes: meta.classes,
        channel_names: meta.channel_names,
        trials,
    };
    set.validate()?;
    Ok(set)
}

// ---------------------------------------------------------------------------
// CSV fixture format
// ---------------------------------------------------------------------------

pub fn save_csv(set: &TrialSet, path: &Path) -> Result<()> {
    set.validate()?;
    let mut out = String::from("subject,label");
    for c in 0..set.channels {
        for t in 0..set.points {
            out.push_str(&format!(",ch{c}_t{t}"));
        }
    }
    out.push('\n');
    for t in &set.trials {
        out.push_str(&t.subject);
        out.push(',');
        out.push_str(&t.label.to_string());
        for v in &t.data {
            // Shortest round-trip formatting keeps the encoding lossless.
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn ingest_csv(path: &Path, sample_rate_hz: f64) -> Result<TrialSet> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "subject" || cols[1] != "label" {
        return Err(Error::Data(
            "CSV header must start with 'subject,label,ch0_t0,...'".into(),
        ));
    }
    let last = cols[cols.len() - 1];
    let (channels, points) = parse_sample_column(last)
        .map(|(c, t)| (c + 1, t + 1))
        .ok_or_else(|| Error::Data(format!("malformed sample column '{last}'")))?;
    if cols.len() != 2 + channels * points {
        return Err(Error::Data(format!(
            "CSV header names {} sample columns but the last is ch{}_t{}",
            cols.len() - 2,
            channels - 1,
            points - 1
        )));
    }
    let mut trials = Vec::new();
    let mut classes = 1;
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Data(format!(
                "trial {row} has {} fields, expected {}",
                fields.len(),
                cols.len()
            )));
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| Error::Data(format!("trial {row} has unknown label '{}'", fields[1])))?;
        classes = classes.max(label + 1);
        let mut data = Vec::with_capacity(channels * points);
        for f in &fields[2..] {
            let v: f32 = f
                .parse()
                .map_err(|_| Error::Data(format!("trial {row} has bad sample '{f}'")))?;
            data.push(v);
        }
        trials.push(Trial {
            subject: fields[0].to_string(),
            label,
            data,
        });
    }
    let set = TrialSet {
        channels,
        points,
        sample_rate_hz,
        classes,
        channel_names: default_channel_names(channels),
        trials,
    };
    set.validate()?;
    Ok(set)
}

fn parse_sample_column(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("ch")?;
    let (c, t) = rest.split_once("_t")?;
    Some((c.parse().ok()?, t.parse().ok()?))
}

/// Load a trial set from either supported encoding: a native directory or a
/// `.csv` fixture (which carries no rate; `csv_rate_hz` supplies it).
pub fn ingest(path: &Path, csv_rate_hz: f64) -> Result<TrialSet> {
    if path.is_dir() {
        ingest_native(path)
    } else if path.extension().map_or(false, |e| e == "csv") {
        ingest_csv(path, csv_rate_hz)
    } else {
        Err(Error::Data(format!(
            "unsupported data source {} (expected a trial directory or .csv)",
            path.display()
        )))
    }
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Linear-interpolation resampling to `target_hz`. The output has
/// `round(P * target / source)` points; equal rates return the input
/// unchanged.
pub fn resample(set: &TrialSet, target_hz: f64) -> Result<TrialSet> {
    set.validate()?;
    if target_hz <= 0.0 || !target_hz.is_finite() {
        return Err(Error::Data(format!("bad target rate {target_hz} Hz")));
    }
    if (set.sample_rate_hz - target_hz).abs() < 1e-12 {
        return Ok(set.clone());
    }
    let src_p = set.points;
    let new_p = ((src_p as f64) * target_hz / set.sample_rate_hz).round() as usize;
    if new_p == 0 {
        return Err(Error::Data(format!(
            "resampling {} points from {} to {target_hz} Hz leaves nothing",
            src_p, set.sample_rate_hz
        )));
    }
    let step = set.sample_rate_hz / target_hz;
    let mut trials = Vec::with_capacity(set.trials.len());
    for t in &set.trials {
        let mut data = Vec::with_capacity(set.channels * new_p);
        for c in 0..set.channels {
            let row = &t.data[c * src_p..(c + 1) * src_p];
            for i in 0..new_p {
                let pos = (i as f64) * step;
                let lo = pos.floor() as usize;
                if lo + 1 >= src_p {
                    data.push(row[src_p - 1]);
                } else {
                    let frac = pos - lo as f64;
                    let v =
                        (row[lo] as f64) * (1.0 - frac) + (row[lo + 1] as f64) * frac;
                    data.push(v as f32);
                }
            }
        }
        trials.push(Trial {
            subject: t.subject.clone(),
            label: t.label,
            data,
        });
    }
    Ok(TrialSet {
        channels: set.channels,
        points: new_p,
        sample_rate_hz: target_hz,
        classes: set.classes,
        channel_names: set.channel_names.clone(),
        trials,
    })
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose variance was zero; they divide by one instead.
    pub degenerate: Vec<usize>,
}

/// Per-channel mean and (population) standard deviation over every sample of
/// every trial. Compute this on the training split only.
pub fn channel_stats(set: &TrialSet) -> Result<ChannelStats> {
    set.validate()?;
    if set.is_empty() {
        return Err(Error::Data("cannot take statistics of an empty set".into()));
    }
    let n = (set.trials.len() * set.points) as f64;
    let mut mean = vec![0.0f64; set.channels];
    let mut sq = vec![0.0f64; set.channels];
    for t in &set.trials {
        for c in 0..set.channels {
            for v in &t.data[c * set.points..(c + 1) * set.points] {
                mean[c] += *v as f64;
                sq[c] += (*v as f64) * (*v as f64);
            }
        }
    }
    let mut std = Vec::with_capacity(set.channels);
    let mut degenerate = Vec::new();
    for c in 0..set.channels {
        mean[c] /= n;
        let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
        if var == 0.0 {
            degenerate.push(c);
            std.push(1.0);
        } else {
            std.push(var.sqrt());
        }
    }
    Ok(ChannelStats {
        mean,
        std,
        degenerate,
    })
}

/// Apply a z-score with previously computed statistics.
pub fn apply_stats(set: &TrialSet, stats: &ChannelStats) -> Result<TrialSet> {
    if stats.mean.len() != set.channels {
        return Err(Error::Data(format!(
            "statistics cover {} channels, set has {}",
            stats.mean.len(),
            set.channels
        )));
    }
    let mut out = set.clone();
    for t in &mut out.trials {
        for c in 0..set.channels {
            let (m, s) = (stats.mean[c], stats.std[c]);
            for v in &mut t.data[c * set.points..(c + 1) * set.points] {
                *v = (((*v as f64) - m) / s) as f32;
            }
        }
    }
    Ok(out)
}

/// Normalize a train/validation pair using train statistics for both.
pub fn normalize(
    train: &TrialSet,
    val: &TrialSet,
) -> Result<(TrialSet, TrialSet, ChannelStats)> {
    let stats = channel_stats(train)?;
    Ok((
        apply_stats(train, &stats)?,
        apply_stats(val, &stats)?,
        stats,
    ))
}

// ---------------------------------------------------------------------------
// Sliding-window stacking
// ---------------------------------------------------------------------------

/// Trials stacked into network layout `[n, channels, slices, window]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedSet {
    pub channels: usize,
    pub slices: usize,
    pub window: usize,
    pub stride: usize,
    pub classes: usize,
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub subjects: Vec<String>,
}

impl SlicedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn trial_stride(&self) -> usize {
        self.channels * self.slices * self.window
    }

    /// Assemble a batch tensor for the given trial indices.
    pub fn batch<E: Elem>(&self, idx: &[usize]) -> Result<(Tensor<E>, Vec<usize>)> {
        if idx.is_empty() {
            return Err(Error::Data("cannot build an empty batch".into()));
        }
        let ts = self.trial_stride();
        let mut data = Vec::with_capacity(idx.len() * ts);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Data(format!(
                    "batch index {i} out of range ({} trials)",
                    self.len()
                )));
            }
            data.extend(self.data[i * ts..(i + 1) * ts].iter().map(|v| E::from_f64c(*v as f64)));
            labels.push(self.labels[i]);
        }
        let x = Tensor::from_vec(
            vec![idx.len(), self.channels, self.slices, self.window],
            data,
        )?;
        Ok((x, labels))
    }

    /// Deterministic byte image of the stacked data, for reproducibility
    /// checks and hashing.
    pub fn bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4 + self.labels.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&(*l as u64).to_le_bytes());
        }
        out
    }
}

/// Cut every trial into overlapping windows: slice `s` covers points
/// `[s*stride, s*stride + window)` and the count is
/// `(points - window) / stride + 1`. A trailing remainder shorter than the
/// stride is dropped.
pub fn slice_stack(set: &TrialSet, window: usize, stride: usize) -> Result<SlicedSet> {
    set.validate()?;
    if window == 0 || stride == 0 {
        return Err(Error::Data("window and stride must be positive".into()));
    }
    if set.points < window {
        return Err(Error::Data(format!(
            "trials hold {} points, shorter than the {window}-point window",
            set.points
        )));
    }
    let slices = (set.points - window) / stride + 1;
    let mut data = Vec::with_capacity(set.trials.len() * set.channels * slices * window);
    let mut labels = Vec::with_capacity(set.trials.len());
    let mut subjects = Vec::with_capacity(set.trials.len());
    for t in &set.trials {
        for c in 0..set.channels {
            let row = &t.data[c * set.points..(c + 1) * set.points];
            for s in 0..slices {
                data.extend_from_slice(&row[s * stride..s * stride + window]);
            }
        }
        labels.push(t.label);
        subjects.push(t.subject.clone());
    }
    Ok(SlicedSet {
        channels: set.channels,
        slices,
        window,
        stride,
        classes: set.classes,
        data,
        labels,
        subjects,
    })
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitMode {
    /// Pool all subjects, stratified split at the given train ratio.
    Mixed { ratio: f64 },
    /// Restrict to one subject's trials, then split as `Mixed`.
    SubjectSpecific { subject: String, ratio: f64 },
}

/// Deterministic stratified split into (train, val). Per-class train counts
/// follow largest-remainder rounding of `ratio`, so a balanced set with an
/// evenly divisible ratio splits exactly evenly.
pub fn split(set: &TrialSet, mode: &SplitMode, seed: u64) -> Result<(TrialSet, TrialSet)> {
    set.validate()?;
    let (pool, ratio): (Vec<usize>, f64) = match mode {
        SplitMode::Mixed { ratio } => ((0..set.trials.len()).collect(), *ratio),
        SplitMode::SubjectSpecific { subject, ratio } => {
            let idx: Vec<usize> = set
                .trials
                .iter()
                .enumerate()
                .filter(|(_, t)| &t.subject == subject)
                .map(|(i, _)| i)
                .collect();
            if idx.is_empty() {
                return Err(Error::Data(format!(
                    "unknown subject '{subject}' (known: {})",
                    set.subjects().join(", ")
                )));
            }
            (idx, *ratio)
        }
    };
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Data(format!("train ratio {ratio} outside [0, 1]")));
    }

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); set.classes];
    for &i in &pool {
        per_class[set.trials[i].label].push(i);
    }
    let target_total = ((pool.len() as f64) * ratio).round() as usize;
    // Largest-remainder apportionment of the train budget across classes.
    let mut takes: Vec<usize> = Vec::with_capacity(set.classes);
    let mut fracs: Vec<(f64, usize)> = Vec::with_capacity(set.classes);
    for (k, members) in per_class.iter().enumerate() {
        let share = (members.len() as f64) * ratio;
        takes.push(share.floor() as usize);
        fracs.push((share - share.floor(), k));
    }
    let mut assigned: usize = takes.iter().sum();
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for (_, k) in fracs {
        if assigned >= target_total {
            break;
        }
        if takes[k] < per_class[k].len() {
            takes[k] += 1;
            assigned += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (k, members) in per_class.iter().enumerate() {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        train_idx.extend_from_slice(&m[..takes[k]]);
        val_idx.extend_from_slice(&m[takes[k]..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();

    let pick = |idx: &[usize]| TrialSet {
        channels: set.channels,
        points: set.points,
        sample_rate_hz: set.sample_rate_hz,
        classes: set.classes,
        channel_names: set.channel_names.clone(),
        trials: idx.iter().map(|&i| set.trials[i].clone()).collect(),
    };
    Ok((pick(&train_idx), pick(&val_idx)))
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub channels: usize,
    pub points: usize,
    pub sample_rate_hz: f64,
    pub trials_per_class: usize,
    pub snr_db: f64,
    pub subjects: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            channels: 8,
            points: 750,
            sample_rate_hz: 250.0,
            trials_per_class: 200,
            snr_db: 20.0,
            subjects: 4,
            seed: 7,
        }
    }
}

/// Frequency carried by each class: 8, 12, 16, ... Hz.
pub fn class_frequency(class: usize) -> f64 {
    8.0 + 4.0 * class as f64
}

/// Channels carrying a class's oscillation.
pub fn class_channels(class: usize, channels: usize) -> [usize; 2] {
    [(2 * class) % channels, (2 * class + 1) % channels]
}

/// Voss-McCartney pink noise: a sum of staggered-rate white generators, one
/// halving its update rate per row.
fn pink_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    const ROWS: usize = 16;
    let mut rows = [0.0f64; ROWS];
    for r in rows.iter_mut() {
        *r = rng.gen::<f64>() - 0.5;
    }
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        for (j, r) in rows.iter_mut().enumerate() {
            if i % (1usize << j) == 0 {
                *r = rng.gen::<f64>() - 0.5;
            }
        }
        let white = rng.gen::<f64>() - 0.5;
        out.push(rows.iter().sum::<f64>() + white);
    }
    out
}

/// Band-limited class oscillations on class-specific channel pairs plus pink
/// noise everywhere, mixed at the requested SNR. Deterministic in the seed.
pub fn synth_generate(cfg: &SynthConfig) -> Result<TrialSet> {
    if cfg.classes == 0 || cfg.channels == 0 || cfg.points == 0 || cfg.trials_per_class == 0 {
        return Err(Error::Data("synthetic config has an empty dimension".into()));
    }
    if !cfg.snr_db.is_finite() {
        return Err(Error::Data("SNR must be finite".into()));
    }
    if cfg.subjects == 0 {
        return Err(Error::Data("need at least one subject".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Sine power is A^2/2 with A=1; scale noise to hit the requested SNR.
    let signal_power = 0.5;
    let noise_power = signal_power / 10f64.powf(cfg.snr_db / 10.0);
    let mut trials = Vec::with_capacity(cfg.classes * cfg.trials_per_class);
    for t in 0..cfg.trials_per_class {
        for k in 0..cfg.classes {
            let freq = class_frequency(k);
            let active = class_channels(k, cfg.channels);
            let phase = rng.gen::<f64>() * std::f64::consts::TAU;
            let mut data = Vec::with_capacity(cfg.channels * cfg.points);
            for c in 0..cfg.channels {
                let noise = pink_noise(&mut rng, cfg.points);
                let nvar = {
                    let m = noise.iter().sum::<f64>() / cfg.points as f64;
                    (noise.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                        / cfg.points as f64)
                        .max(1e-30)
                };
                let nscale = (noise_power / nvar).sqrt();
                let carries = active.contains(&c);
                for (i, n) in noise.iter().enumerate() {
                    let mut v = n * nscale;
                    if carries {
                        v += (std::f64::consts::TAU * freq * (i as f64)
                            / cfg.sample_rate_hz
                            + phase)
                            .sin();
                    }
                    data.push(v as f32);
                }
            }
            trials.push(Trial {
                subject: format!("S{}", 1 + (t % cfg.subjects)),
                label: k,
                data,
            });
        }
    }
    let set = TrialSet {
        channels: cfg.channels,
        points: cfg.points,
        sample_rate_hz: cfg.sample_rate_hz,
        classes: cfg.classes,
        channel_names: default_channel_names(cfg.channels),
        trials,
    };
    set.validate()?;
    Ok(set)
}

/// Goertzel power of one channel row at a frequency, used by tests and the
/// synthetic-data oracle.
pub fn band_power(row: &[f32], freq_hz: f64, rate_hz: f64) -> f64 {
    let n = row.len() as f64;
    let k = (freq_hz * n / rate_hz).round();
    let w = std::f64::consts::TAU * k / n;
    let coeff = 2.0 * w.cos();
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    for v in row {
        let s0 = *v as f64 + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    s1 * s1 + s2 * s2 - coeff * s1 * s2
}
