//! The over-parameterized search network: every edge carries all candidate
//! operators blended by a softmax over its architecture parameters.
//!
//! Cells come in Normal/Reduction pairs. Architecture parameters are shared
//! across all cells of the same type, so one `ArchParams` drives the whole
//! network. Edges leaving a reduction cell's two inputs use time-halving
//! operator variants; everything downstream runs at the halved extent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::StateEntry;
use crate::error::Error;
use crate::layers::{build_operator, Conv2d, FactorizedReduce, LinearLayer, OpBlock};
use crate::space::SearchSpace;
use crate::tensor::nn::{global_avg_pool, Conv2dSpec};
use crate::tensor::{add_n, scale_by_element, softmax, Elem, Tensor};
use crate::Result;

/// Standard deviation for architecture-parameter initialization.
pub const ARCH_INIT_STD: f64 = 1e-3;

/// Cell wiring: nodes 0 and 1 are the two inputs, intermediates follow.
/// Edges run from every earlier node to each intermediate, grouped by
/// destination, so node `n` (0-based intermediate) owns `2 + n` edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellTopology {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl CellTopology {
    pub fn new(nodes: usize) -> Self {
        let mut edges = Vec::new();
        for n in 0..nodes {
            let dst = 2 + n;
            for src in 0..dst {
                edges.push((src, dst));
            }
        }
        CellTopology { nodes, edges }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edge-index range feeding intermediate node `n`.
    pub fn edges_into(&self, n: usize) -> std::ops::Range<usize> {
        let start: usize = (0..n).map(|m| 2 + m).sum();
        start..start + 2 + n
    }
}

/// Which half of the architecture parameters an operation concerns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellType {
    Normal,
    Reduce,
}

impl CellType {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduce => "reduce",
        }
    }
}

/// Architecture parameters: one vector per edge and cell type, each indexing
/// the operator list of the (possibly restricted) search space.
pub struct ArchParams<E: Elem> {
    pub normal: Vec<Tensor<E>>,
    pub reduce: Vec<Tensor<E>>,
    pub num_ops: usize,
}

/// Numerically stable softmax on plain values; the detached twin of the
/// graph op, used for logging and discretization.
pub fn softmax_f64(vals: &[f64]) -> Vec<f64> {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

impl<E: Elem> ArchParams<E> {
    /// Draw every entry from N(0, std); small magnitudes keep the initial
    /// mixtures near uniform.
    pub fn init(topo: &CellTopology, num_ops: usize, std: f64, seed: u64) -> Result<Self> {
        if num_ops == 0 {
            return Err(Error::Config("arch params need at least one operator".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(format!("bad std: {e}")))?;
        let mut draw = |n: usize| -> Vec<Tensor<E>> {
            (0..n)
                .map(|_| {
                    let vals: Vec<E> =
                        (0..num_ops).map(|_| E::from_f64c(dist.sample(&mut rng))).collect();
                    Tensor::param(vec![num_ops], vals).expect("theta shape")
                })
                .collect()
        };
        let normal = draw(topo.edge_count());
        let reduce = draw(topo.edge_count());
        Ok(ArchParams {
            normal,
            reduce,
            num_ops,
        })
    }

    pub fn edges(&self, which: CellType) -> &[Tensor<E>] {
        match which {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    /// All parameter tensors, normal edges first.
    pub fn all(&self) -> Vec<Tensor<E>> {
        self.normal.iter().chain(self.reduce.iter()).cloned().collect()
    }

    /// Detached per-edge softmax probabilities, computed in f64.
    pub fn probs(&self, which: CellType) -> Vec<Vec<f64>> {
        self.edges(which)
            .iter()
            .map(|t| {
                let vals: Vec<f64> = t.with_data(|d| d.iter().map(|v| v.to_f64c()).collect());
                softmax_f64(&vals)
            })
            .collect()
    }

    /// Flat copy of every entry (normal edges then reduce edges), in f64.
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.normal.iter().chain(self.reduce.iter()) {
            t.with_data(|d| out.extend(d.iter().map(|v| v.to_f64c())));
        }
        out
    }

    pub fn has_non_finite(&self) -> bool {
        self.normal
            .iter()
            .chain(self.reduce.iter())
            .any(|t| t.has_non_finite())
    }

    pub fn state(&self) -> Vec<StateEntry> {
        let mut out = Vec::new();
        for (name, list) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            for (i, t) in list.iter().enumerate() {
                out.push(StateEntry::new(
                    format!("theta.{name}.{i}"),
                    t.shape().to_vec(),
                    t.with_data(|d| d.iter().map(|v| v.to_f64c() as f32).collect()),
                ));
            }
        }
        out
    }

    pub fn load_state(&mut self, entries: &[StateEntry]) -> Result<()> {
        let map: std::collections::HashMap<&str, &StateEntry> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();
        for (name, list) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            for (i, t) in list.iter().enumerate() {
                let key = format!("theta.{name}.{i}");
                let e = map.get(key.as_str()).ok_or_else(|| {
                    Error::Checkpoint(format!("missing architecture parameter '{key}'"))
                })?;
                if e.shape != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "architecture parameter '{key}': shape {:?} vs {:?}",
                        e.shape,
                        t.shape()
                    )));
                }
                t.set_data(
                    &e.data.iter().map(|v| E::from_f64c(*v as f64)).collect::<Vec<_>>(),
                );
            }
        }
        Ok(())
    }
}

/// One softmax-blended edge: every candidate operator instantiated once.
pub struct MixedEdge<E: Elem> {
    pub ops: Vec<OpBlock<E>>,
}

/// Blend all candidate outputs with softmax weights over `theta`.
///
/// The none operator contributes exactly zero signal and zero gradient, so
/// its term is skipped; its probability still participates through the
/// softmax normalization.
pub fn mixed_edge_forward<E: Elem>(
    edge: &mut MixedEdge<E>,
    x: &Tensor<E>,
    theta: &Tensor<E>,
    none_index: usize,
    training: bool,
) -> Result<Tensor<E>> {
    if theta.numel() != edge.ops.len() {
        return Err(Error::Config(format!(
            "mixed edge has {} operators but theta has {} entries",
            edge.ops.len(),
            theta.numel()
        )));
    }
    if theta.has_non_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            detail: "non-finite architecture parameter entering mixed edge".into(),
        });
    }
    let w = softmax(theta, 0)?;
    let mut terms = Vec::with_capacity(edge.ops.len());
    for (o, op) in edge.ops.iter_mut().enumerate() {
        if o == none_index {
            continue;
        }
        let y = op.forward(x, training)?;
        terms.push(scale_by_element(&y, &w, o)?);
    }
    if terms.is_empty() {
        // Space degenerated to {none}: the edge emits zeros.
        let mut z = OpBlock::Zero { stride_w: 1 };
        return z.forward(x, training);
    }
    add_n(&terms)
}

struct CellInstance<E: Elem> {
    reduction: bool,
    pre0: Option<FactorizedReduce<E>>,
    edges: Vec<MixedEdge<E>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MetaNetConfig {
    pub channels: usize,
    pub classes: usize,
    /// Number of Normal+Reduction cell pairs.
    pub blocks: usize,
    /// Intermediate nodes per cell.
    pub nodes: usize,
    pub input_slices: usize,
    pub input_time: usize,
}

impl MetaNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.classes < 2 || self.blocks == 0 || self.nodes == 0 {
            return Err(Error::Config(format!(
                "bad network config: channels {}, classes {}, blocks {}, nodes {}",
                self.channels, self.classes, self.blocks, self.nodes
            )));
        }
        if self.input_slices == 0 {
            return Err(Error::Config("input slice count must be positive".into()));
        }
        if self.input_time < (1usize << self.blocks) {
            return Err(Error::Config(format!(
                "time extent {} cannot survive {} reductions",
                self.input_time, self.blocks
            )));
        }
        Ok(())
    }
}

pub(crate) fn ceil_div(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

/// Per-cell extent bookkeeping shared by build and cost accounting.
/// Returns (input0_time, base_time, output_time) per cell plus the minimum
/// extent any edge operator consumes.
pub(crate) fn extent_plan(blocks: usize, input_time: usize) -> (Vec<(usize, usize, usize)>, usize) {
    let mut plan = Vec::new();
    let mut out_m2 = input_time;
    let mut out_m1 = input_time;
    let mut min_extent = input_time;
    for i in 0..2 * blocks {
        let reduction = i % 2 == 1;
        let base = out_m1;
        let out = if reduction { ceil_div(base, 2) } else { base };
        min_extent = min_extent.min(if reduction { ceil_div(base, 2) } else { base });
        plan.push((out_m2, base, out));
        out_m2 = out_m1;
        out_m1 = out;
    }
    (plan, min_extent)
}

/// The searchable over-network.
pub struct MetaNet<E: Elem> {
    pub cfg: MetaNetConfig,
    /// Space actually in play after kernel-extent exclusion.
    pub space: SearchSpace,
    pub excluded_ops: Vec<String>,
    pub topo: CellTopology,
    stem: Conv2d<E>,
    cells: Vec<CellInstance<E>>,
    head: LinearLayer<E>,
}

pub(crate) fn op_tag(name: &str) -> String {
    name.replace(' ', "_")
}

impl<E: Elem> MetaNet<E> {
    pub fn new(cfg: MetaNetConfig, space: &SearchSpace, seed: u64) -> Result<Self> {
        cfg.validate()?;
        space.validate()?;
        let (plan, min_extent) = extent_plan(cfg.blocks, cfg.input_time);
        let (space, excluded_ops) = space.restrict_to_time_extent(min_extent);
        space.validate()?;

        let topo = CellTopology::new(cfg.nodes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::new(
            &mut rng,
            cfg.channels,
            cfg.channels,
            (1, 1),
            Conv2dSpec::default(),
            true,
        );

        let mut cells = Vec::new();
        for (i, (in0, base, _)) in plan.iter().enumerate() {
            let reduction = i % 2 == 1;
            let pre0 = if in0 > base {
                debug_assert_eq!(ceil_div(*in0, 2), *base);
                Some(FactorizedReduce::new(&mut rng, cfg.channels))
            } else {
                None
            };
            let mut edges = Vec::new();
            for (src, _dst) in &topo.edges {
                let reduction_edge = reduction && *src < 2;
                let ops = space
                    .ops
                    .iter()
                    .map(|spec| build_operator(&mut rng, spec, cfg.channels, reduction_edge))
                    .collect();
                edges.push(MixedEdge { ops });
            }
            cells.push(CellInstance {
                reduction,
                pre0,
                edges,
            });
        }
        let head = LinearLayer::new(&mut rng, cfg.channels, cfg.classes);
        Ok(MetaNet {
            cfg,
            space,
            excluded_ops,
            topo,
            stem,
            cells,
            head,
        })
    }

    /// Architecture parameters matching this network's restricted space.
    pub fn init_arch_params(&self, seed: u64) -> Result<ArchParams<E>> {
        ArchParams::init(&self.topo, self.space.len(), ARCH_INIT_STD, seed)
    }

    fn check_input(&self, x: &Tensor<E>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "network input must be [batch, channels, slices, time], got {s:?}"
            )));
        }
        if s[0] == 0 {
            return Err(Error::Shape("network input has an empty batch axis".into()));
        }
        if s[1] != self.cfg.channels {
            return Err(Error::Shape(format!(
                "channel axis mismatch: network built for {}, input has {}",
                self.cfg.channels, s[1]
            )));
        }
        if s[3] < (1usize << self.cfg.blocks) {
            return Err(Error::Shape(format!(
                "time axis {} too short for {} reductions",
                s[3], self.cfg.blocks
            )));
        }
        Ok(())
    }

    pub fn forward(
        &mut self,
        x: &Tensor<E>,
        arch: &ArchParams<E>,
        training: bool,
    ) -> Result<Tensor<E>> {
        self.check_input(x)?;
        if arch.num_ops != self.space.len()
            || arch.normal.len() != self.topo.edge_count()
            || arch.reduce.len() != self.topo.edge_count()
        {
            return Err(Error::Config(format!(
                "architecture parameters ({} ops, {} edges) do not match network ({} ops, {} edges)",
                arch.num_ops,
                arch.normal.len(),
                self.space.len(),
                self.topo.edge_count()
            )));
        }
        let none_index = self.space.none_index();
        let stem_out = self.stem.forward(x)?;
        let mut prev2 = stem_out.clone();
        let mut prev1 = stem_out;
        for cell in self.cells.iter_mut() {
            let thetas = if cell.reduction {
                &arch.reduce
            } else {
                &arch.normal
            };
            let s0 = match &mut cell.pre0 {
                Some(fr) => fr.forward(&prev2, training)?,
                None => prev2.clone(),
            };
            let s1 = prev1.clone();
            let mut states = vec![s0, s1];
            for n in 0..self.topo.nodes {
                let mut parts = Vec::with_capacity(2 + n);
                for ei in self.topo.edges_into(n) {
                    let (src, _) = self.topo.edges[ei];
                    let y = mixed_edge_forward(
                        &mut cell.edges[ei],
                        &states[src],
                        &thetas[ei],
                        none_index,
                        training,
                    )?;
                    parts.push(y);
                }
                states.push(add_n(&parts)?);
            }
            let out = add_n(&states[2..])?;
            prev2 = prev1;
            prev1 = out;
        }
        let pooled = global_avg_pool(&prev1)?;
        self.head.forward(&pooled)
    }

    /// All learnable network weights (architecture parameters excluded).
    pub fn weight_params(&self) -> Vec<Tensor<E>> {
        let mut out = Vec::new();
        self.stem.params(&mut out);
        for cell in &self.cells {
            if let Some(fr) = &cell.pre0 {
                fr.params(&mut out);
            }
            for edge in &cell.edges {
                for op in &edge.ops {
                    op.params(&mut out);
                }
            }
        }
        self.head.params(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.weight_params().iter().map(|t| t.numel()).sum()
    }

    /// Parameters that exist regardless of which operators are chosen:
    /// stem, head, and input preprocessing.
    pub fn fixed_param_count(&self) -> usize {
        let mut out = Vec::new();
        self.stem.params(&mut out);
        for cell in &self.cells {
            if let Some(fr) = &cell.pre0 {
                fr.params(&mut out);
            }
        }
        self.head.params(&mut out);
        out.iter().map(|t| t.numel()).sum()
    }

    pub fn state(&self) -> Vec<StateEntry> {
        let mut out = Vec::new();
        self.stem.state("stem", &mut out);
        for (i, cell) in self.cells.iter().enumerate() {
            if let Some(fr) = &cell.pre0 {
                fr.state(&format!("cell{i}.pre0"), &mut out);
            }
            for (e, edge) in cell.edges.iter().enumerate() {
                for (o, op) in edge.ops.iter().enumerate() {
                    let tag = op_tag(&self.space.ops[o].to_string());
                    op.state(&format!("cell{i}.edge{e}.{tag}"), &mut out);
                }
            }
        }
        self.head.state("head", &mut out);
        out
    }

    pub fn load_state(&mut self, entries: &[StateEntry]) -> Result<()> {
        let map: std::collections::HashMap<String, &StateEntry> =
            entries.iter().map(|e| (e.name.clone(), e)).collect();
        self.stem.load_state("stem", &map)?;
        for i in 0..self.cells.len() {
            let space_ops = self.space.ops.clone();
            let cell = &mut self.cells[i];
            if let Some(fr) = &mut cell.pre0 {
                fr.load_state(&format!("cell{i}.pre0"), &map)?;
            }
            for (e, edge) in cell.edges.iter_mut().enumerate() {
                for (o, op) in edge.ops.iter_mut().enumerate() {
                    let tag = op_tag(&space_ops[o].to_string());
                    op.load_state(&format!("cell{i}.edge{e}.{tag}"), &map)?;
                }
            }
        }
        self.head.load_state("head", &map)
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Number of cells per type, used to scale template costs up to the
    /// whole network.
    pub fn cells_of_type(&self, which: CellType) -> usize {
        self.cells
            .iter()
            .filter(|c| c.reduction == (which == CellType::Reduce))
            .count()
    }
}
