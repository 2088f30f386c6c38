//! Alternating bi-level architecture search under a static augmented-
//! Lagrangian penalty: expected-parameter-scale bounds and an annealed
//! skip-connection floor, both differentiable in the architecture
//! parameters.
//!
//! Each step updates network weights on a training batch, then architecture
//! parameters on a validation batch with the penalized objective. All
//! penalty hinges vanish when their weights are zero, so a fully
//! unconstrained run traces exactly the plain first-order alternation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SlicedSet;
use crate::error::Error;
use crate::genotype::{derive, DeriveContext, Genotype};
use crate::optim::{Adam, MomentumSgd};
use crate::space::CostModel;
use crate::supernet::{softmax_f64, ArchParams, CellType, MetaNet};
use crate::tensor::nn::cross_entropy;
use crate::tensor::{add, add_n, affine, mul, relu, select, softmax, sum_all, Elem, Tensor};
use crate::Result;

/// Reference parameter bounds at the 22-channel width they were measured
/// for; widths scale them by `(channels / 22)^2` since every operator's
/// parameter count is dominated by its `channels^2` pointwise term.
pub const REFERENCE_LOW: f64 = 18_200.0;
pub const REFERENCE_HIGH: f64 = 32_100.0;
pub const REFERENCE_CHANNELS: f64 = 22.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintConfig {
    /// Weight of the lower parameter-scale hinge.
    pub lambda1: f64,
    /// Weight of the upper parameter-scale hinge.
    pub lambda2: f64,
    /// Weight of the skip-floor hinge.
    pub lambda3: f64,
    /// Scale bounds, in raw parameters unless `bounds_in_sigma` is set.
    pub c_low: f64,
    pub c_high: f64,
    /// Softmax temperature inside the skip mass.
    pub temperature: f64,
    /// Skip-floor scale; defaults to half the achievable maximum.
    pub beta: Option<f64>,
    /// Epochs-to-floor-time conversion: t = epoch/total * time_scale.
    pub time_scale: f64,
    /// Compare bounds against the normalized cost instead of raw parameters.
    pub bounds_in_sigma: bool,
    /// Average the skip mass over edges instead of summing it.
    pub phi_edge_mean: bool,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            lambda1: 0.05,
            lambda2: 0.05,
            lambda3: 0.1,
            c_low: REFERENCE_LOW,
            c_high: REFERENCE_HIGH,
            temperature: 1.0,
            beta: None,
            time_scale: 5.0,
            bounds_in_sigma: false,
            phi_edge_mean: false,
        }
    }
}

impl ConstraintConfig {
    /// Default bounds rescaled to a channel width.
    pub fn scaled_bounds(channels: usize) -> (f64, f64) {
        let r = (channels as f64 / REFERENCE_CHANNELS).powi(2);
        (REFERENCE_LOW * r, REFERENCE_HIGH * r)
    }

    /// Defaults with the scale bounds adapted to a channel width.
    pub fn for_channels(channels: usize) -> Self {
        let (c_low, c_high) = Self::scaled_bounds(channels);
        ConstraintConfig {
            c_low,
            c_high,
            ..Default::default()
        }
    }

    /// All penalties off: plain first-order alternation.
    pub fn unconstrained() -> Self {
        ConstraintConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..Default::default()
        }
    }

    pub fn is_unconstrained(&self) -> bool {
        self.lambda1 == 0.0 && self.lambda2 == 0.0 && self.lambda3 == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::Config(format!(
                "penalty weights must be non-negative, got ({}, {}, {})",
                self.lambda1, self.lambda2, self.lambda3
            )));
        }
        if !(self.c_low < self.c_high) {
            return Err(Error::Config(format!(
                "scale bounds need c_low < c_high, got [{}, {}]",
                self.c_low, self.c_high
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return Err(Error::Config(format!(
                    "skip-floor scale must be positive, got {b}"
                )));
            }
        }
        if !(self.time_scale >= 0.0) {
            return Err(Error::Config(format!(
                "time scale must be non-negative, got {}",
                self.time_scale
            )));
        }
        Ok(())
    }

    /// The skip-floor scale actually in force for a given edge count.
    pub fn resolved_beta(&self, ctx: &PenaltyContext) -> f64 {
        self.beta.unwrap_or(if self.phi_edge_mean {
            0.5
        } else {
            0.5 * ctx.total_edges as f64
        })
    }
}

/// Static cost context the penalties read: per-operator costs aligned with
/// the (restricted) search space, cell multiplicities, and the always-present
/// parameter mass.
#[derive(Debug, Clone)]
pub struct PenaltyContext {
    pub raw: Vec<f64>,
    pub sigma: Vec<f64>,
    pub skip_index: usize,
    pub normal_cells: usize,
    pub reduce_cells: usize,
    pub fixed_params: f64,
    /// Edges per cell template.
    pub template_edges: usize,
    /// Edges across both templates — the "|edges|" every penalty ranges over.
    pub total_edges: usize,
}

impl PenaltyContext {
    pub fn new<E: Elem>(net: &MetaNet<E>) -> Self {
        let cost = CostModel::new(&net.space, net.cfg.channels);
        let template_edges = net.topo.edge_count();
        PenaltyContext {
            raw: cost.raw,
            sigma: cost.sigma,
            skip_index: net.space.skip_index(),
            normal_cells: net.cells_of_type(CellType::Normal),
            reduce_cells: net.cells_of_type(CellType::Reduce),
            fixed_params: net.fixed_param_count() as f64,
            template_edges,
            total_edges: 2 * template_edges,
        }
    }
}

// ---------------------------------------------------------------------------
// Penalty quantities — detached (f64) and differentiable (tensor) twins
// ---------------------------------------------------------------------------

/// Σ over edges of softmax(θ_edge)·cost, on plain probabilities.
pub fn expected_cost(probs: &[Vec<f64>], cost: &[f64]) -> f64 {
    probs
        .iter()
        .map(|p| p.iter().zip(cost).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Skip probability of one edge at a softmax temperature.
pub fn skip_mass(theta_row: &[f64], temperature: f64, skip_index: usize) -> f64 {
    let scaled: Vec<f64> = theta_row.iter().map(|v| v / temperature).collect();
    softmax_f64(&scaled)[skip_index]
}

fn theta_rows<E: Elem>(arch: &ArchParams<E>, which: CellType) -> Vec<Vec<f64>> {
    arch.edges(which)
        .iter()
        .map(|t| t.data_vec().iter().map(|v| v.to_f64c()).collect())
        .collect()
}

/// Expected normalized operator cost over all template edges.
pub fn omega_sigma<E: Elem>(arch: &ArchParams<E>, ctx: &PenaltyContext) -> f64 {
    expected_cost(&arch.probs(CellType::Normal), &ctx.sigma)
        + expected_cost(&arch.probs(CellType::Reduce), &ctx.sigma)
}

/// Expected whole-network parameter count: per-template expected edge costs
/// scaled by cell multiplicity, plus the operator-independent parameters.
pub fn omega_raw<E: Elem>(arch: &ArchParams<E>, ctx: &PenaltyContext) -> f64 {
    ctx.normal_cells as f64 * expected_cost(&arch.probs(CellType::Normal), &ctx.raw)
        + ctx.reduce_cells as f64 * expected_cost(&arch.probs(CellType::Reduce), &ctx.raw)
        + ctx.fixed_params
}

/// Total (or per-edge mean) skip probability at the configured temperature.
pub fn phi<E: Elem>(arch: &ArchParams<E>, ctx: &PenaltyContext, cfg: &ConstraintConfig) -> f64 {
    let mut total = 0.0;
    for which in [CellType::Normal, CellType::Reduce] {
        for row in theta_rows(arch, which) {
            total += skip_mass(&row, cfg.temperature, ctx.skip_index);
        }
    }
    if cfg.phi_edge_mean {
        total / ctx.total_edges as f64
    } else {
        total
    }
}

/// Annealed lower floor on the skip mass: β e^{-t}.
pub fn skip_floor(t: f64, beta: f64) -> f64 {
    beta * (-t).exp()
}

/// Training time in floor units: epoch fraction times the configured scale.
pub fn epoch_time(epoch: usize, total_epochs: usize, time_scale: f64) -> f64 {
    if total_epochs == 0 {
        0.0
    } else {
        (epoch as f64 / total_epochs as f64) * time_scale
    }
}

fn cost_tensor<E: Elem>(cost: &[f64]) -> Result<Tensor<E>> {
    Tensor::from_vec(
        vec![cost.len()],
        cost.iter().map(|v| E::from_f64c(*v)).collect(),
    )
}

/// Differentiable Σ_edges softmax(θ_e)·cost over one template.
fn expected_cost_tensor<E: Elem>(edges: &[Tensor<E>], cost: &[f64]) -> Result<Tensor<E>> {
    let ct = cost_tensor(cost)?;
    let mut parts = Vec::with_capacity(edges.len());
    for th in edges {
        parts.push(sum_all(&mul(&softmax(th, 0)?, &ct)?));
    }
    add_n(&parts)
}

/// Differentiable expected network parameter count (see [`omega_raw`]).
pub fn omega_raw_tensor<E: Elem>(
    arch: &ArchParams<E>,
    ctx: &PenaltyContext,
) -> Result<Tensor<E>> {
    let n = expected_cost_tensor(&arch.normal, &ctx.raw)?;
    let r = expected_cost_tensor(&arch.reduce, &ctx.raw)?;
    Ok(affine(
        &add(
            &affine(&n, ctx.normal_cells as f64, 0.0),
            &affine(&r, ctx.reduce_cells as f64, 0.0),
        )?,
        1.0,
        ctx.fixed_params,
    ))
}

/// Differentiable expected normalized cost (see [`omega_sigma`]).
pub fn omega_sigma_tensor<E: Elem>(
    arch: &ArchParams<E>,
    ctx: &PenaltyContext,
) -> Result<Tensor<E>> {
    add(
        &expected_cost_tensor(&arch.normal, &ctx.sigma)?,
        &expected_cost_tensor(&arch.reduce, &ctx.sigma)?,
    )
}

/// Differentiable skip mass (see [`phi`]).
pub fn phi_tensor<E: Elem>(
    arch: &ArchParams<E>,
    ctx: &PenaltyContext,
    cfg: &ConstraintConfig,
) -> Result<Tensor<E>> {
    let mut parts = Vec::with_capacity(ctx.total_edges);
    for edges in [&arch.normal, &arch.reduce] {
        for th in edges.iter() {
            let scaled = affine(th, 1.0 / cfg.temperature, 0.0);
            parts.push(select(&softmax(&scaled, 0)?, ctx.skip_index)?);
        }
    }
    let total = add_n(&parts)?;
    Ok(if cfg.phi_edge_mean {
        affine(&total, 1.0 / ctx.total_edges as f64, 0.0)
    } else {
        total
    })
}

/// Penalty state at one step, for histories and trajectory logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRecord {
    pub omega_sigma: f64,
    pub omega_raw: f64,
    pub phi: f64,
    pub skip_floor: f64,
    pub lower_active: bool,
    pub upper_active: bool,
    pub sparsity_active: bool,
}

/// The constrained objective: validation loss plus the three hinge terms.
/// Hinges with zero weight are never built, so the returned tensor is the
/// validation loss itself when every penalty is off.
pub fn lagrangian_loss<E: Elem>(
    l_val: &Tensor<E>,
    arch: &ArchParams<E>,
    cfg: &ConstraintConfig,
    t: f64,
    ctx: &PenaltyContext,
) -> Result<(Tensor<E>, PenaltyRecord)> {
    cfg.validate()?;
    let os = omega_sigma(arch, ctx);
    let or = omega_raw(arch, ctx);
    let ph = phi(arch, ctx, cfg);
    let beta = cfg.resolved_beta(ctx);
    let floor = skip_floor(t, beta);
    let bound_value = if cfg.bounds_in_sigma { os } else { or };

    let mut total = l_val.clone();
    if cfg.lambda1 > 0.0 {
        let bound = if cfg.bounds_in_sigma {
            omega_sigma_tensor(arch, ctx)?
        } else {
            omega_raw_tensor(arch, ctx)?
        };
        let hinge = relu(&affine(&bound, -1.0, cfg.c_low));
        total = add(&total, &affine(&hinge, cfg.lambda1, 0.0))?;
    }
    if cfg.lambda2 > 0.0 {
        let bound = if cfg.bounds_in_sigma {
            omega_sigma_tensor(arch, ctx)?
        } else {
            omega_raw_tensor(arch, ctx)?
        };
        let hinge = relu(&affine(&bound, 1.0, -cfg.c_high));
        total = add(&total, &affine(&hinge, cfg.lambda2, 0.0))?;
    }
    if cfg.lambda3 > 0.0 {
        let hinge = relu(&affine(&phi_tensor(arch, ctx, cfg)?, -1.0, floor));
        total = add(&total, &affine(&hinge, cfg.lambda3, 0.0))?;
    }
    let record = PenaltyRecord {
        omega_sigma: os,
        omega_raw: or,
        phi: ph,
        skip_floor: floor,
        lower_active: cfg.lambda1 > 0.0 && bound_value < cfg.c_low,
        upper_active: cfg.lambda2 > 0.0 && bound_value > cfg.c_high,
        sparsity_active: cfg.lambda3 > 0.0 && ph < floor,
    };
    Ok((total, record))
}

// ---------------------------------------------------------------------------
// Bi-level stepping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr: f64,
    pub w_lr_min: f64,
    pub w_momentum: f64,
    pub theta_lr: f64,
    pub theta_beta1: f64,
    pub theta_beta2: f64,
    /// Learning-rate decay factor applied at each milestone.
    pub theta_gamma: f64,
    /// Milestones as fractions of the total epoch budget.
    pub theta_milestones: Vec<f64>,
    /// Epochs the derived genotype must stay unchanged to declare
    /// convergence.
    pub patience: usize,
    pub seed: u64,
    pub constraint: ConstraintConfig,
}

impl Default for SearchRunConfig {
    fn default() -> Self {
        SearchRunConfig {
            epochs: 30,
            batch_size: 32,
            w_lr: 0.01,
            w_lr_min: 1e-4,
            w_momentum: 0.9,
            theta_lr: 0.01,
            theta_beta1: 0.5,
            theta_beta2: 0.99,
            theta_gamma: 0.1,
            theta_milestones: vec![0.5, 0.75],
            patience: 10,
            seed: 0,
            constraint: ConstraintConfig::default(),
        }
    }
}

impl SearchRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.w_lr > 0.0) || !(self.theta_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        self.constraint.validate()
    }

    fn milestone_epochs(&self) -> Vec<usize> {
        self.theta_milestones
            .iter()
            .map(|f| ((*f) * self.epochs as f64).floor() as usize)
            .collect()
    }
}

/// Mutable optimization state carried across steps: optimizer buffers plus
/// per-step penalty history and per-epoch loss history.
pub struct SearchState<E: Elem> {
    pub epoch: usize,
    pub step: usize,
    pub w_opt: MomentumSgd<E>,
    pub theta_opt: Adam<E>,
    pub penalties: Vec<PenaltyRecord>,
    pub losses: Vec<EpochLosses>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_train: f64,
    pub l_val: f64,
    pub l_lag: f64,
}

impl<E: Elem> SearchState<E> {
    pub fn new(net: &MetaNet<E>, arch: &ArchParams<E>, cfg: &SearchRunConfig) -> Self {
        SearchState {
            epoch: 0,
            step: 0,
            w_opt: MomentumSgd::new(
                net.weight_params(),
                cfg.w_lr,
                cfg.w_lr_min,
                cfg.w_momentum,
            ),
            theta_opt: Adam::new(arch.all(), cfg.theta_lr, cfg.theta_beta1, cfg.theta_beta2),
            penalties: Vec::new(),
            losses: Vec::new(),
        }
    }

    fn zero_all_grads(&self, arch: &ArchParams<E>) {
        self.w_opt.zero_grads();
        self.theta_opt.zero_grads();
        for th in arch.all() {
            th.zero_grad();
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub l_train: f64,
    pub l_val: f64,
    pub l_lag: f64,
    pub record: PenaltyRecord,
}

fn check_finite(name: &str, v: f64, epoch: usize, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            step,
            detail: format!("{name} became {v}"),
        })
    }
}

/// One alternation: a weight update on the training batch, then an
/// architecture update on the validation batch under the penalized
/// objective. The weight step never sees validation data; the architecture
/// step never touches weights.
pub fn search_step<E: Elem>(
    state: &mut SearchState<E>,
    net: &mut MetaNet<E>,
    arch: &ArchParams<E>,
    train: (&Tensor<E>, &[usize]),
    val: (&Tensor<E>, &[usize]),
    cfg: &SearchRunConfig,
    t: f64,
    ctx: &PenaltyContext,
) -> Result<StepLosses> {
    // Phase 1: weights on the training loss, architecture frozen.
    let logits = net.forward(train.0, arch, true)?;
    let l_train = cross_entropy(&logits, train.1)?;
    let lt = l_train.item().to_f64c();
    check_finite("training loss", lt, state.epoch, state.step)?;
    l_train.backward()?;
    state.w_opt.step();
    state.zero_all_grads(arch);

    // Phase 2: architecture on the penalized validation loss, weights frozen.
    let logits_v = net.forward(val.0, arch, true)?;
    let l_val = cross_entropy(&logits_v, val.1)?;
    let lv = l_val.item().to_f64c();
    check_finite("validation loss", lv, state.epoch, state.step)?;
    let (l_lag, record) = lagrangian_loss(&l_val, arch, &cfg.constraint, t, ctx)?;
    let ll = l_lag.item().to_f64c();
    check_finite("penalized loss", ll, state.epoch, state.step)?;
    l_lag.backward()?;
    state.theta_opt.step();
    state.zero_all_grads(arch);

    state.step += 1;
    state.penalties.push(record);
    Ok(StepLosses {
        l_train: lt,
        l_val: lv,
        l_lag: ll,
        record,
    })
}

// ---------------------------------------------------------------------------
// Trajectory log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub cell_type: String,
    pub edge_id: usize,
    pub operator_name: String,
    pub softmax_prob: f64,
    pub omega_raw: f64,
    pub phi: f64,
    pub skip_floor: f64,
    pub l_train: f64,
    pub l_val: f64,
    pub l_lag: f64,
}

pub const TRAJECTORY_HEADER: &str =
    "epoch,cell_type,edge_id,operator_name,softmax_prob,omega_raw,phi,skip_floor,L_train,L_val,L_lag";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    /// Record every operator's probability on every edge at one epoch.
    #[allow(clippy::too_many_arguments)]
    pub fn push_epoch(
        &mut self,
        epoch: usize,
        op_names: &[String],
        probs_normal: &[Vec<f64>],
        probs_reduce: &[Vec<f64>],
        record: &PenaltyRecord,
        losses: &EpochLosses,
    ) {
        for (cell_type, probs) in [("normal", probs_normal), ("reduce", probs_reduce)] {
            for (edge_id, edge) in probs.iter().enumerate() {
                for (o, p) in edge.iter().enumerate() {
                    self.rows.push(TrajectoryRow {
                        epoch,
                        cell_type: cell_type.to_string(),
                        edge_id,
                        operator_name: op_names[o].clone(),
                        softmax_prob: *p,
                        omega_raw: record.omega_raw,
                        phi: record.phi,
                        skip_floor: record.skip_floor,
                        l_train: losses.l_train,
                        l_val: losses.l_val,
                        l_lag: losses.l_lag,
                    });
                }
            }
        }
    }

    pub fn epochs(&self) -> usize {
        self.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAJECTORY_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                r.epoch,
                r.cell_type,
                r.edge_id,
                r.operator_name,
                r.softmax_prob,
                r.omega_raw,
                r.phi,
                r.skip_floor,
                r.l_train,
                r.l_val,
                r.l_lag
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Trajectory> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty trajectory CSV".into()))?;
        if header != TRAJECTORY_HEADER {
            return Err(Error::Data(format!(
                "unexpected trajectory header '{header}'"
            )));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(Error::Data(format!(
                    "trajectory row {i} has {} fields, expected 11",
                    f.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Data(format!("trajectory row {i}: bad number '{s}'")))
            };
            rows.push(TrajectoryRow {
                epoch: f[0]
                    .parse()
                    .map_err(|_| Error::Data(format!("trajectory row {i}: bad epoch")))?,
                cell_type: f[1].to_string(),
                edge_id: f[2]
                    .parse()
                    .map_err(|_| Error::Data(format!("trajectory row {i}: bad edge id")))?,
                operator_name: f[3].to_string(),
                softmax_prob: num(f[4])?,
                omega_raw: num(f[5])?,
                phi: num(f[6])?,
                skip_floor: num(f[7])?,
                l_train: num(f[8])?,
                l_val: num(f[9])?,
                l_lag: num(f[10])?,
            });
        }
        Ok(Trajectory { rows })
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Trajectory> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Full search loop
// ---------------------------------------------------------------------------

pub struct SearchOutcome<E: Elem> {
    pub state: SearchState<E>,
    pub trajectory: Trajectory,
    pub genotype: Genotype,
    pub epochs_run: usize,
    pub converged: bool,
}

impl<E: Elem> std::fmt::Debug for SearchOutcome<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SearchOutcome")
            .field("epochs_run", &self.epochs_run)
            .field("converged", &self.converged)
            .field("genotype", &self.genotype)
            .finish_non_exhaustive()
    }
}

fn epoch_batches(
    n: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    if n <= batch_size {
        return vec![idx];
    }
    idx.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

/// Run the alternating search to the epoch budget or until the derived
/// genotype has been stable for `patience` consecutive epochs. Logs one
/// trajectory block per epoch (every operator on every edge).
pub fn run_search<E: Elem>(
    net: &mut MetaNet<E>,
    arch: &ArchParams<E>,
    train: &SlicedSet,
    val: &SlicedSet,
    cfg: &SearchRunConfig,
) -> Result<SearchOutcome<E>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("search needs non-empty train and val sets".into()));
    }
    for (name, set) in [("train", train), ("val", val)] {
        if let Some(l) = set.labels.iter().find(|l| **l >= net.cfg.classes) {
            return Err(Error::Data(format!(
                "{name} split has label {l}, network expects [0, {})",
                net.cfg.classes
            )));
        }
    }
    let ctx = PenaltyContext::new(net);
    let dctx = DeriveContext {
        blocks: net.cfg.blocks,
        channels: net.cfg.channels,
        classes: net.cfg.classes,
        excluded_ops: net.excluded_ops.clone(),
    };
    let op_names = net.space.names();
    let milestones = cfg.milestone_epochs();
    let mut state = SearchState::new(net, arch, cfg);
    let mut trajectory = Trajectory::default();
    let mut prev_geno: Option<Genotype> = None;
    let mut stable = 0usize;
    let mut converged = false;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        state.w_opt.set_cosine_lr(epoch, cfg.epochs);
        state
            .theta_opt
            .set_multistep_lr(epoch, &milestones, cfg.theta_gamma);
        let t = epoch_time(epoch, cfg.epochs, cfg.constraint.time_scale);

        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let tb = epoch_batches(train.len(), cfg.batch_size, &mut rng);
        let vb = epoch_batches(val.len(), cfg.batch_size, &mut rng);
        let steps = tb.len().min(vb.len());

        let (mut st, mut sv, mut sl) = (0.0, 0.0, 0.0);
        for s in 0..steps {
            let (tx, ty) = train.batch::<E>(&tb[s])?;
            let (vx, vy) = val.batch::<E>(&vb[s])?;
            let losses = search_step(
                &mut state,
                net,
                arch,
                (&tx, &ty),
                (&vx, &vy),
                cfg,
                t,
                &ctx,
            )?;
            st += losses.l_train;
            sv += losses.l_val;
            sl += losses.l_lag;
        }
        let losses = EpochLosses {
            epoch,
            l_train: st / steps as f64,
            l_val: sv / steps as f64,
            l_lag: sl / steps as f64,
        };
        state.losses.push(losses);

        // End-of-epoch snapshot for the log and convergence check.
        let record = PenaltyRecord {
            omega_sigma: omega_sigma(arch, &ctx),
            omega_raw: omega_raw(arch, &ctx),
            phi: phi(arch, &ctx, &cfg.constraint),
            skip_floor: skip_floor(t, cfg.constraint.resolved_beta(&ctx)),
            lower_active: false,
            upper_active: false,
            sparsity_active: false,
        };
        let probs_n = arch.probs(CellType::Normal);
        let probs_r = arch.probs(CellType::Reduce);
        trajectory.push_epoch(epoch, &op_names, &probs_n, &probs_r, &record, &losses);

        let geno = derive(arch, &net.space, &net.topo, &dctx)?;
        match &prev_geno {
            Some(p) if p.normal == geno.normal && p.reduce == geno.reduce => stable += 1,
            _ => stable = 0,
        }
        prev_geno = Some(geno);
        epochs_run = epoch + 1;
        if stable >= cfg.patience {
            converged = true;
            break;
        }
    }

    let genotype = match prev_geno {
        Some(g) => g,
        None => derive(arch, &net.space, &net.topo, &dctx)?,
    };
    Ok(SearchOutcome {
        state,
        trajectory,
        genotype,
        epochs_run,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_grads;
    use crate::space::SearchSpace;
    use crate::supernet::MetaNetConfig;
    use rand::Rng;

    fn space4() -> SearchSpace {
        SearchSpace::from_names("s4", &["none", "skip", "sep 3x1", "maxpool 3x1"]).unwrap()
    }

    fn net_cfg(nodes: usize) -> MetaNetConfig {
        MetaNetConfig {
            channels: 4,
            classes: 2,
            blocks: 1,
            nodes,
            input_slices: 2,
            input_time: 16,
        }
    }

    fn small_net(nodes: usize, seed: u64) -> (MetaNet<f64>, ArchParams<f64>) {
        let net = MetaNet::new(net_cfg(nodes), &space4(), seed).unwrap();
        let arch = net.init_arch_params(seed + 1).unwrap();
        (net, arch)
    }

    fn toy_sliced(n: usize, classes: usize, seed: u64) -> SlicedSet {
        let (channels, slices, window) = (4usize, 2usize, 16usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per = channels * slices * window;
        let mut data = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % classes;
            for j in 0..per {
                let base: f32 = rng.gen_range(-1.0..1.0);
                // Class-dependent offset on channel 0 gives the loss signal.
                let bump = if j < slices * window { 0.5 * label as f32 } else { 0.0 };
                data.push(base + bump);
            }
            labels.push(label);
        }
        SlicedSet {
            channels,
            slices,
            window,
            stride: window,
            classes,
            data,
            labels,
            subjects: vec!["S1".to_string(); n],
        }
    }

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(vec![1], vec![v]).unwrap()
    }

    // -- value helpers -------------------------------------------------------

    #[test]
    fn expected_cost_matches_hand_values() {
        // [0, ln 3] softmaxes to exactly [1/4, 3/4].
        let probs = softmax_f64(&[0.0, 3f64.ln()]);
        assert!((probs[0] - 0.25).abs() < 1e-12);
        let cost = [0.0, 1.0];
        assert!((expected_cost(&[vec![0.5, 0.5]], &cost) - 0.5).abs() < 1e-12);
        assert!((expected_cost(&[probs], &cost) - 0.75).abs() < 1e-12);
        // Sums over edges.
        assert!(
            (expected_cost(&[vec![0.5, 0.5], vec![0.0, 1.0]], &cost) - 1.5).abs() < 1e-12
        );
    }

    #[test]
    fn skip_mass_examples() {
        // Uniform logits give exactly 1/2 at any temperature.
        assert!((skip_mass(&[0.0, 0.0], 1.0, 0) - 0.5).abs() < 1e-12);
        assert!((skip_mass(&[0.0, 0.0], 7.3, 0) - 0.5).abs() < 1e-12);
        // Extreme temperature flattens toward 1/K.
        let p = skip_mass(&[1.3, -0.4, 0.2], 1e6, 1);
        assert!((p - 1.0 / 3.0).abs() < 1e-4, "got {p}");
        // Temperature divides the logits: softmax([1,0]/2)[0].
        let p = skip_mass(&[1.0, 0.0], 2.0, 0);
        assert!((p - 0.6224593312018546).abs() < 1e-12, "got {p}");
        assert!((p - softmax_f64(&[0.5, 0.0])[0]).abs() < 1e-15);
        assert!((p - softmax_f64(&[2.0, 0.0])[0]).abs() > 1e-2);
    }

    #[test]
    fn skip_floor_decays_from_beta() {
        assert!((skip_floor(0.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((skip_floor(2f64.ln(), 0.5) - 0.25).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let f = skip_floor(k as f64 * 0.3, 0.7);
            assert!(f < prev);
            prev = f;
        }
        assert!((epoch_time(0, 30, 5.0) - 0.0).abs() < 1e-12);
        assert!((epoch_time(3, 30, 5.0) - 0.5).abs() < 1e-12);
        assert!((epoch_time(30, 30, 5.0) - 5.0).abs() < 1e-12);
        assert_eq!(epoch_time(4, 0, 5.0), 0.0);
    }

    // -- penalty quantities on a real network --------------------------------

    #[test]
    fn omega_and_phi_at_uniform_logits() {
        // Space costs at 4 channels: none/skip/maxpool are parameter-free,
        // sep 3x1 holds 2(3*4 + 16 + 8) = 72, so sigma = [0,0,1,0].
        let (net, arch) = small_net(2, 9);
        let ctx = PenaltyContext::new(&net);
        assert_eq!(ctx.raw, vec![0.0, 0.0, 72.0, 0.0]);
        assert_eq!(ctx.sigma, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(ctx.template_edges, 5);
        assert_eq!(ctx.total_edges, 10);
        assert_eq!((ctx.normal_cells, ctx.reduce_cells), (1, 1));

        for th in arch.all() {
            th.set_data(&[0.0; 4]);
        }
        // Ten edges, each contributing mean(sigma) = 1/4 and mean(raw) = 18.
        assert!((omega_sigma(&arch, &ctx) - 2.5).abs() < 1e-12);
        let expect_raw = ctx.fixed_params + 10.0 * 18.0;
        assert!((omega_raw(&arch, &ctx) - expect_raw).abs() < 1e-9);
        // Four ops, uniform: each edge holds skip mass 1/4.
        let cfg = ConstraintConfig::default();
        assert!((phi(&arch, &ctx, &cfg) - 2.5).abs() < 1e-12);
        let mean_cfg = ConstraintConfig {
            phi_edge_mean: true,
            ..Default::default()
        };
        assert!((phi(&arch, &ctx, &mean_cfg) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn tensor_and_scalar_penalty_paths_agree() {
        let (net, arch) = small_net(2, 21);
        let ctx = PenaltyContext::new(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for th in arch.all() {
            let vals: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            th.set_data(&vals);
        }
        for temperature in [0.5, 1.0, 3.0] {
            let cfg = ConstraintConfig {
                temperature,
                ..Default::default()
            };
            let pt = phi_tensor(&arch, &ctx, &cfg).unwrap().item();
            assert!((pt - phi(&arch, &ctx, &cfg)).abs() < 1e-12);
        }
        let ot = omega_raw_tensor(&arch, &ctx).unwrap().item();
        assert!((ot - omega_raw(&arch, &ctx)).abs() < 1e-9);
        let st = omega_sigma_tensor(&arch, &ctx).unwrap().item();
        assert!((st - omega_sigma(&arch, &ctx)).abs() < 1e-12);
    }

    #[test]
    fn penalties_are_invariant_to_logit_shifts() {
        let (net, arch) = small_net(2, 33);
        let ctx = PenaltyContext::new(&net);
        let cfg = ConstraintConfig::default();
        let before = (
            omega_sigma(&arch, &ctx),
            omega_raw(&arch, &ctx),
            phi(&arch, &ctx, &cfg),
        );
        for (i, th) in arch.all().iter().enumerate() {
            let shift = 3.0 + i as f64;
            th.update_data(|d| d.iter_mut().for_each(|v| *v += shift));
        }
        assert!((omega_sigma(&arch, &ctx) - before.0).abs() < 1e-10);
        assert!((omega_raw(&arch, &ctx) - before.1).abs() < 1e-9);
        assert!((phi(&arch, &ctx, &cfg) - before.2).abs() < 1e-10);
    }

    // -- the penalized objective ---------------------------------------------

    #[test]
    fn unconstrained_objective_is_the_validation_loss_itself() {
        let (net, arch) = small_net(2, 5);
        let ctx = PenaltyContext::new(&net);
        let l_val = scalar(0.731);
        let cfg = ConstraintConfig::unconstrained();
        assert!(cfg.is_unconstrained());
        let (total, rec) = lagrangian_loss(&l_val, &arch, &cfg, 0.0, &ctx).unwrap();
        // Same graph node, not merely the same value.
        assert_eq!(total.id(), l_val.id());
        assert!(!rec.lower_active && !rec.upper_active && !rec.sparsity_active);
    }

    #[test]
    fn satisfied_constraints_add_exactly_zero() {
        let (net, arch) = small_net(2, 5);
        let ctx = PenaltyContext::new(&net);
        let or = omega_raw(&arch, &ctx);
        let ph = phi(&arch, &ctx, &ConstraintConfig::default());
        let cfg = ConstraintConfig {
            c_low: or - 100.0,
            c_high: or + 100.0,
            beta: Some(ph / 2.0),
            ..Default::default()
        };
        let l_val = scalar(1.25);
        let (total, rec) = lagrangian_loss(&l_val, &arch, &cfg, 0.0, &ctx).unwrap();
        // Hinges exist in the graph but contribute literal zero.
        assert_ne!(total.id(), l_val.id());
        assert_eq!(total.item().to_bits(), 1.25f64.to_bits());
        assert!(!rec.lower_active && !rec.upper_active && !rec.sparsity_active);
    }

    #[test]
    fn violated_bounds_add_weighted_hinge_values() {
        let (net, arch) = small_net(2, 5);
        let ctx = PenaltyContext::new(&net);
        let or = omega_raw(&arch, &ctx);
        let l_val = scalar(2.0);

        // Upper bound exceeded by 10, weight 2: adds exactly 20.
        let cfg = ConstraintConfig {
            lambda1: 0.0,
            lambda2: 2.0,
            lambda3: 0.0,
            c_low: 0.0,
            c_high: or - 10.0,
            ..Default::default()
        };
        let (total, rec) = lagrangian_loss(&l_val, &arch, &cfg, 0.0, &ctx).unwrap();
        assert!((total.item() - 22.0).abs() < 1e-9);
        assert!(rec.upper_active && !rec.lower_active);

        // Lower bound missed by 5, weight 3: adds exactly 15.
        let cfg = ConstraintConfig {
            lambda1: 3.0,
            lambda2: 0.0,
            lambda3: 0.0,
            c_low: or + 5.0,
            c_high: or + 1e9,
            ..Default::default()
        };
        let (total, rec) = lagrangian_loss(&l_val, &arch, &cfg, 0.0, &ctx).unwrap();
        assert!((total.item() - 17.0).abs() < 1e-9);
        assert!(rec.lower_active && !rec.upper_active);

        // Skip floor above current mass by delta, weight 4.
        let ph = phi(&arch, &ctx, &ConstraintConfig::default());
        let cfg = ConstraintConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 4.0,
            beta: Some(ph + 0.3),
            ..Default::default()
        };
        let (total, rec) = lagrangian_loss(&l_val, &arch, &cfg, 0.0, &ctx).unwrap();
        assert!((total.item() - (2.0 + 4.0 * 0.3)).abs() < 1e-9);
        assert!(rec.sparsity_active);
    }

    #[test]
    fn sigma_bounds_mode_switches_the_measured_quantity() {
        let (net, arch) = small_net(2, 5);
        let ctx = PenaltyContext::new(&net);
        let os = omega_sigma(&arch, &ctx);
        let cfg = ConstraintConfig {
            lambda1: 0.0,
            lambda2: 1.0,
            lambda3: 0.0,
            c_low: 0.0,
            c_high: os - 0.5,
            bounds_in_sigma: true,
            ..Default::default()
        };
        let l_val = scalar(0.0);
        let (total, rec) = lagrangian_loss(&l_val, &arch, &cfg, 0.0, &ctx).unwrap();
        assert!((total.item() - 0.5).abs() < 1e-10);
        assert!(rec.upper_active);
    }

    #[test]
    fn hinge_gradients_match_finite_differences() {
        let (net, arch) = small_net(2, 41);
        let ctx = PenaltyContext::new(&net);
        let or = omega_raw(&arch, &ctx);
        let params: Vec<(String, Tensor<f64>)> = arch
            .all()
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("theta{i}"), t))
            .collect();

        // Lower bound and skip floor active.
        let cfg = ConstraintConfig {
            c_low: or + 50.0,
            c_high: or + 1e9,
            beta: Some(ctx.total_edges as f64),
            ..Default::default()
        };
        let l_val = scalar(0.4);
        let mut f = || Ok(lagrangian_loss(&l_val, &arch, &cfg, 0.0, &ctx)?.0);
        let r = check_grads(&params, &mut f, 1e-5, None).unwrap();
        assert!(r.passes(1e-6), "lower+floor: max_err {}", r.max_err);

        // Upper bound active instead.
        let cfg = ConstraintConfig {
            c_low: or - 200.0,
            c_high: or - 50.0,
            beta: Some(ctx.total_edges as f64),
            temperature: 2.0,
            ..Default::default()
        };
        let mut f = || Ok(lagrangian_loss(&l_val, &arch, &cfg, 0.3, &ctx)?.0);
        let r = check_grads(&params, &mut f, 1e-5, None).unwrap();
        assert!(r.passes(1e-6), "upper+floor: max_err {}", r.max_err);
    }

    #[test]
    fn dominant_sparsity_penalty_raises_every_skip_mass() {
        let (net, arch) = small_net(2, 17);
        let ctx = PenaltyContext::new(&net);
        // Floor pinned above the achievable maximum keeps the hinge active.
        let cfg = ConstraintConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 1.0,
            beta: Some(ctx.total_edges as f64),
            ..Default::default()
        };
        let l_val = scalar(0.9);
        let mut opt = Adam::new(arch.all(), 0.01, 0.5, 0.99);
        let skip_probs = |arch: &ArchParams<f64>| -> Vec<f64> {
            let mut out = Vec::new();
            for which in [CellType::Normal, CellType::Reduce] {
                for row in arch.probs(which) {
                    out.push(row[ctx.skip_index]);
                }
            }
            out
        };
        let mut prev = skip_probs(&arch);
        for _ in 0..10 {
            let (total, rec) = lagrangian_loss(&l_val, &arch, &cfg, 0.0, &ctx).unwrap();
            assert!(rec.sparsity_active);
            total.backward().unwrap();
            opt.step();
            opt.zero_grads();
            let now = skip_probs(&arch);
            for (edge, (a, b)) in prev.iter().zip(&now).enumerate() {
                assert!(b > a, "edge {edge}: skip mass fell from {a} to {b}");
            }
            prev = now;
        }
    }

    // -- configuration -------------------------------------------------------

    #[test]
    fn constraint_validation_rejects_bad_settings() {
        let bad = [
            ConstraintConfig {
                lambda1: -0.1,
                ..Default::default()
            },
            ConstraintConfig {
                c_low: 10.0,
                c_high: 10.0,
                ..Default::default()
            },
            ConstraintConfig {
                c_low: 50.0,
                c_high: 20.0,
                ..Default::default()
            },
            ConstraintConfig {
                temperature: 0.0,
                ..Default::default()
            },
            ConstraintConfig {
                beta: Some(0.0),
                ..Default::default()
            },
            ConstraintConfig {
                time_scale: -1.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        ConstraintConfig::default().validate().unwrap();
    }

    #[test]
    fn bounds_scale_quadratically_with_width() {
        let (lo, hi) = ConstraintConfig::scaled_bounds(22);
        assert!((lo - 18_200.0).abs() < 1e-9 && (hi - 32_100.0).abs() < 1e-9);
        let (lo, hi) = ConstraintConfig::scaled_bounds(11);
        assert!((lo - 4550.0).abs() < 1e-9 && (hi - 8025.0).abs() < 1e-9);
        let cfg = ConstraintConfig::for_channels(44);
        assert!((cfg.c_low - 72_800.0).abs() < 1e-9);
        assert!((cfg.c_high - 128_400.0).abs() < 1e-9);
    }

    #[test]
    fn beta_defaults_to_half_the_edge_budget() {
        let (net, _) = small_net(2, 5);
        let ctx = PenaltyContext::new(&net);
        assert!((ConstraintConfig::default().resolved_beta(&ctx) - 5.0).abs() < 1e-12);
        let mean_cfg = ConstraintConfig {
            phi_edge_mean: true,
            ..Default::default()
        };
        assert!((mean_cfg.resolved_beta(&ctx) - 0.5).abs() < 1e-12);
        let explicit = ConstraintConfig {
            beta: Some(1.7),
            ..Default::default()
        };
        assert!((explicit.resolved_beta(&ctx) - 1.7).abs() < 1e-12);
    }

    // -- full loop ------------------------------------------------------------

    fn quick_cfg(epochs: usize, seed: u64) -> SearchRunConfig {
        let (net, _) = small_net(1, 0);
        let ctx = PenaltyContext::new(&net);
        SearchRunConfig {
            epochs,
            batch_size: 4,
            seed,
            constraint: ConstraintConfig {
                c_low: ctx.fixed_params,
                c_high: ctx.fixed_params + 2.0 * 72.0 * ctx.total_edges as f64,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn run_search_smoke_records_everything() {
        let (mut net, arch) = small_net(1, 7);
        let train = toy_sliced(8, 2, 100);
        let val = toy_sliced(8, 2, 101);
        let cfg = quick_cfg(3, 42);
        let out = run_search(&mut net, &arch, &train, &val, &cfg).unwrap();
        assert_eq!(out.epochs_run, 3);
        assert!(!out.converged);
        assert_eq!(out.state.losses.len(), 3);
        for l in &out.state.losses {
            assert!(l.l_train.is_finite() && l.l_val.is_finite() && l.l_lag.is_finite());
        }
        // 2 steps per epoch (8 samples, batch 4), each logging one record.
        assert_eq!(out.state.penalties.len(), 6);
        // One row per (epoch, edge, operator): 3 * 4 edges * 4 ops.
        assert_eq!(out.trajectory.rows.len(), 3 * 4 * 4);
        assert_eq!(out.trajectory.epochs(), 3);
        // Per edge and epoch the probabilities sum to one.
        for ep in 0..3 {
            for ct in ["normal", "reduce"] {
                for e in 0..2 {
                    let s: f64 = out
                        .trajectory
                        .rows
                        .iter()
                        .filter(|r| r.epoch == ep && r.cell_type == ct && r.edge_id == e)
                        .map(|r| r.softmax_prob)
                        .sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
        out.genotype.validate(&net.space).unwrap();
    }

    #[test]
    fn run_search_is_deterministic() {
        let train = toy_sliced(8, 2, 100);
        let val = toy_sliced(8, 2, 101);
        let cfg = quick_cfg(3, 9);
        let (mut net_a, arch_a) = small_net(1, 7);
        let (mut net_b, arch_b) = small_net(1, 7);
        let out_a = run_search(&mut net_a, &arch_a, &train, &val, &cfg).unwrap();
        let out_b = run_search(&mut net_b, &arch_b, &train, &val, &cfg).unwrap();
        for (ta, tb) in arch_a.all().iter().zip(arch_b.all().iter()) {
            let (da, db) = (ta.data_vec(), tb.data_vec());
            assert_eq!(da.len(), db.len());
            for (a, b) in da.iter().zip(&db) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        for (wa, wb) in net_a.weight_params().iter().zip(net_b.weight_params().iter()) {
            for (a, b) in wa.data_vec().iter().zip(&wb.data_vec()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(out_a.trajectory, out_b.trajectory);
        assert_eq!(out_a.genotype.normal, out_b.genotype.normal);
        assert_eq!(out_a.genotype.reduce, out_b.genotype.reduce);
    }

    #[test]
    fn zero_epoch_run_derives_from_initial_parameters() {
        let (mut net, arch) = small_net(1, 7);
        let before: Vec<Vec<f64>> = arch.all().iter().map(|t| t.data_vec()).collect();
        let expect = derive(
            &arch,
            &net.space,
            &net.topo,
            &DeriveContext {
                blocks: net.cfg.blocks,
                channels: net.cfg.channels,
                classes: net.cfg.classes,
                excluded_ops: net.excluded_ops.clone(),
            },
        )
        .unwrap();
        let train = toy_sliced(8, 2, 100);
        let val = toy_sliced(8, 2, 101);
        let cfg = quick_cfg(0, 1);
        let out = run_search(&mut net, &arch, &train, &val, &cfg).unwrap();
        assert_eq!(out.epochs_run, 0);
        assert!(!out.converged);
        assert!(out.trajectory.rows.is_empty());
        assert_eq!(out.genotype.normal, expect.normal);
        assert_eq!(out.genotype.reduce, expect.reduce);
        let after: Vec<Vec<f64>> = arch.all().iter().map(|t| t.data_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn stable_genotype_stops_early() {
        let (mut net, arch) = small_net(1, 7);
        let train = toy_sliced(8, 2, 100);
        let val = toy_sliced(8, 2, 101);
        // Vanishing learning rates freeze the derivation from the start.
        let mut cfg = quick_cfg(10, 3);
        cfg.w_lr = 1e-12;
        cfg.w_lr_min = 1e-13;
        cfg.theta_lr = 1e-12;
        cfg.patience = 2;
        let out = run_search(&mut net, &arch, &train, &val, &cfg).unwrap();
        assert!(out.converged);
        assert_eq!(out.epochs_run, 3);
        assert_eq!(out.state.losses.len(), 3);
    }

    #[test]
    fn non_finite_loss_reports_divergence() {
        let (mut net, arch) = small_net(1, 7);
        net.weight_params()[0].update_data(|d| d[0] = f64::NAN);
        let train = toy_sliced(8, 2, 100);
        let val = toy_sliced(8, 2, 101);
        let err = run_search(&mut net, &arch, &train, &val, &quick_cfg(2, 1)).unwrap_err();
        match err {
            Error::Diverged { epoch, step, .. } => {
                assert_eq!((epoch, step), (0, 0));
                assert_eq!(err.exit_code(), 3);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn run_search_rejects_bad_labels_and_empty_sets() {
        let (mut net, arch) = small_net(1, 7);
        let train = toy_sliced(8, 2, 100);
        let mut bad = toy_sliced(8, 2, 101);
        bad.labels[3] = 2; // net has 2 classes
        let err = run_search(&mut net, &arch, &train, &bad, &quick_cfg(1, 1)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let empty = SlicedSet {
            channels: 4,
            slices: 2,
            window: 16,
            stride: 16,
            classes: 2,
            data: Vec::new(),
            labels: Vec::new(),
            subjects: Vec::new(),
        };
        let err = run_search(&mut net, &arch, &train, &empty, &quick_cfg(1, 1)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    // -- trajectory serialization ---------------------------------------------

    #[test]
    fn trajectory_header_is_pinned() {
        assert_eq!(
            TRAJECTORY_HEADER,
            "epoch,cell_type,edge_id,operator_name,softmax_prob,omega_raw,phi,skip_floor,L_train,L_val,L_lag"
        );
    }

    #[test]
    fn trajectory_csv_round_trips_losslessly() {
        let (mut net, arch) = small_net(1, 7);
        let train = toy_sliced(8, 2, 100);
        let val = toy_sliced(8, 2, 101);
        let out = run_search(&mut net, &arch, &train, &val, &quick_cfg(2, 5)).unwrap();
        let text = out.trajectory.to_csv();
        let back = Trajectory::from_csv(&text).unwrap();
        assert_eq!(back, out.trajectory);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajectory.csv");
        out.trajectory.write_csv(&path).unwrap();
        assert_eq!(Trajectory::read_csv(&path).unwrap(), out.trajectory);
    }

    #[test]
    fn trajectory_csv_rejects_malformed_input() {
        assert!(Trajectory::from_csv("").is_err());
        assert!(Trajectory::from_csv("epoch,wrong\n").is_err());
        let mut ok = String::from(TRAJECTORY_HEADER);
        ok.push_str("\n0,normal,0,skip,0.5,1.0,0.5,0.25,1.0,1.0\n"); // 10 fields
        assert!(matches!(Trajectory::from_csv(&ok), Err(Error::Data(_))));
        let mut bad_num = String::from(TRAJECTORY_HEADER);
        bad_num.push_str("\n0,normal,0,skip,x,1.0,0.5,0.25,1.0,1.0,1.0\n");
        assert!(matches!(Trajectory::from_csv(&bad_num), Err(Error::Data(_))));
    }

    #[test]
    fn run_config_validation() {
        let mut cfg = SearchRunConfig::default();
        cfg.validate().unwrap();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SearchRunConfig {
            patience: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.patience = 1;
        cfg.w_lr = 0.0;
        assert!(cfg.validate().is_err());
        // Milestones floor against the epoch budget.
        let cfg = SearchRunConfig {
            epochs: 30,
            ..Default::default()
        };
        assert_eq!(cfg.milestone_epochs(), vec![15, 22]);
    }
}
