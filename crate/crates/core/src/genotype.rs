//! Discrete architectures: derivation from learned mixing weights, JSON
//! serialization, compilation into standalone trainable networks, and exact
//! parameter / MAC accounting.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::StateEntry;
use crate::error::Error;
use crate::layers::{build_operator, Conv2d, FactorizedReduce, LinearLayer, OpBlock};
use crate::space::{OpKind, OperatorSpec, SearchSpace};
use crate::supernet::{extent_plan, op_tag, softmax_f64, ArchParams, CellTopology, MetaNetConfig};
use crate::tensor::nn::{global_avg_pool, Conv2dSpec};
use crate::tensor::{add_n, Elem, Tensor};
use crate::Result;

pub const GENOTYPE_SCHEMA_VERSION: u32 = 1;

/// One retained input of an intermediate node: (operator name, source node).
/// Nodes 0 and 1 are the cell inputs; node `2 + n` is the n-th intermediate.
pub type RetainedInput = (String, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeMeta {
    pub blocks: usize,
    pub nodes: usize,
    pub channels: usize,
    pub classes: usize,
    pub space_id: String,
    pub theta_checksum: String,
    #[serde(default)]
    pub excluded_ops: Vec<String>,
}

/// A discrete cell-pair architecture. `normal[n]` / `reduce[n]` list the two
/// retained inputs of intermediate node `n`, ordered by source node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub schema_version: u32,
    pub normal: Vec<Vec<RetainedInput>>,
    pub reduce: Vec<Vec<RetainedInput>>,
    pub meta: GenotypeMeta,
}

/// FNV-1a over the little-endian bytes of every architecture parameter, in
/// storage order; ties a genotype back to the exact θ it was derived from.
pub fn theta_checksum<E: Elem>(arch: &ArchParams<E>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in arch.values() {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Discretize one cell template from per-edge operator probabilities.
///
/// Per edge the highest-probability operator excluding `none` wins; per node
/// the two incoming edges whose winning operators have the highest
/// probability are retained. Ties break toward the lower operator index,
/// then the lower source node id.
pub fn derive_cell(
    probs: &[Vec<f64>],
    space: &SearchSpace,
    topo: &CellTopology,
) -> Result<Vec<Vec<RetainedInput>>> {
    if probs.len() != topo.edge_count() {
        return Err(Error::Genotype(format!(
            "probability table has {} edges, topology has {}",
            probs.len(),
            topo.edge_count()
        )));
    }
    let mut nodes = Vec::with_capacity(topo.nodes);
    for n in 0..topo.nodes {
        // (best prob, best op index, source) per incoming edge.
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(2 + n);
        for ei in topo.edges_into(n) {
            let (src, _) = topo.edges[ei];
            let p = &probs[ei];
            if p.len() != space.len() {
                return Err(Error::Genotype(format!(
                    "edge {ei} has {} probabilities for {} operators",
                    p.len(),
                    space.len()
                )));
            }
            let mut best: Option<(f64, usize)> = None;
            for (o, spec) in space.ops.iter().enumerate() {
                if spec.kind == OpKind::None {
                    continue;
                }
                if !p[o].is_finite() {
                    return Err(Error::Genotype(format!(
                        "non-finite probability on edge {ei}, operator '{}'",
                        spec
                    )));
                }
                if best.map_or(true, |(bp, _)| p[o] > bp) {
                    best = Some((p[o], o));
                }
            }
            let (bp, bo) = best.ok_or_else(|| {
                Error::Genotype("search space has no selectable operator besides 'none'".into())
            })?;
            cands.push((bp, bo, src));
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite probabilities")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut keep: Vec<RetainedInput> = cands[..2]
            .iter()
            .map(|(_, o, src)| (space.ops[*o].to_string(), *src))
            .collect();
        keep.sort_by_key(|(_, src)| *src);
        nodes.push(keep);
    }
    Ok(nodes)
}

/// Extra context recorded into the genotype alongside the derived structure.
#[derive(Debug, Clone)]
pub struct DeriveContext {
    pub blocks: usize,
    pub channels: usize,
    pub classes: usize,
    pub excluded_ops: Vec<String>,
}

/// Discretize learned architecture parameters into a genotype.
pub fn derive<E: Elem>(
    arch: &ArchParams<E>,
    space: &SearchSpace,
    topo: &CellTopology,
    ctx: &DeriveContext,
) -> Result<Genotype> {
    if arch.has_non_finite() {
        return Err(Error::Genotype(
            "architecture parameters contain non-finite values".into(),
        ));
    }
    let pn: Vec<Vec<f64>> = arch
        .normal
        .iter()
        .map(|t| softmax_f64(&t.data_vec().iter().map(|v| v.to_f64c()).collect::<Vec<_>>()))
        .collect();
    let pr: Vec<Vec<f64>> = arch
        .reduce
        .iter()
        .map(|t| softmax_f64(&t.data_vec().iter().map(|v| v.to_f64c()).collect::<Vec<_>>()))
        .collect();
    Ok(Genotype {
        schema_version: GENOTYPE_SCHEMA_VERSION,
        normal: derive_cell(&pn, space, topo)?,
        reduce: derive_cell(&pr, space, topo)?,
        meta: GenotypeMeta {
            blocks: ctx.blocks,
            nodes: topo.nodes,
            channels: ctx.channels,
            classes: ctx.classes,
            space_id: space.id.clone(),
            theta_checksum: theta_checksum(arch),
            excluded_ops: ctx.excluded_ops.clone(),
        },
    })
}

impl Genotype {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serializes")
    }

    pub fn from_json(text: &str) -> Result<Genotype> {
        serde_json::from_str(text)
            .map_err(|e| Error::Genotype(format!("genotype parse failed: {e}")))
    }

    /// Structural validation against a search space.
    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        if self.schema_version != GENOTYPE_SCHEMA_VERSION {
            return Err(Error::Genotype(format!(
                "unsupported genotype schema version {} (expected {})",
                self.schema_version, GENOTYPE_SCHEMA_VERSION
            )));
        }
        if self.meta.blocks == 0 {
            return Err(Error::Genotype("meta.blocks must be positive".into()));
        }
        if self.meta.channels == 0 || self.meta.classes < 2 {
            return Err(Error::Genotype(format!(
                "meta must describe a real network, got channels {} classes {}",
                self.meta.channels, self.meta.classes
            )));
        }
        if self.normal.len() != self.meta.nodes || self.reduce.len() != self.meta.nodes {
            return Err(Error::Genotype(format!(
                "cell templates have {}/{} nodes, meta says {}",
                self.normal.len(),
                self.reduce.len(),
                self.meta.nodes
            )));
        }
        if self.meta.nodes == 0 {
            return Err(Error::Genotype("cells need at least one node".into()));
        }
        for (label, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            for (n, inputs) in cell.iter().enumerate() {
                if inputs.len() != 2 {
                    return Err(Error::Genotype(format!(
                        "{label} node {n} retains {} inputs, expected exactly 2",
                        inputs.len()
                    )));
                }
                for (name, src) in inputs {
                    let spec: OperatorSpec = name.parse().map_err(|e: Error| {
                        Error::Genotype(format!("{label} node {n}: {e}"))
                    })?;
                    if spec.kind == OpKind::None {
                        return Err(Error::Genotype(format!(
                            "{label} node {n} retains 'none', which carries no connection"
                        )));
                    }
                    if space.index_of(name).is_none() {
                        return Err(Error::Genotype(format!(
                            "{label} node {n}: operator '{name}' is not in space '{}'",
                            space.id
                        )));
                    }
                    if *src >= 2 + n {
                        return Err(Error::Genotype(format!(
                            "{label} node {n} reads from node {src}, which is not earlier in the cell"
                        )));
                    }
                }
                if inputs[0].1 >= inputs[1].1 {
                    return Err(Error::Genotype(format!(
                        "{label} node {n} inputs must come from distinct sources in ascending order"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Exact learnable-parameter count of the network this genotype compiles
    /// to, from closed-form per-operator counts (no network is built).
    pub fn count_params(&self, space: &SearchSpace, cfg: &CompileConfig) -> Result<u64> {
        self.validate(space)?;
        cfg.to_net_config(self).validate()?;
        let c = cfg.channels as u64;
        let k = cfg.classes as u64;
        // Stem 1x1 conv with bias, plus the classifier.
        let mut total = (c * c + c) + (k * c + k);
        let (plan, _) = extent_plan(self.meta.blocks, cfg.input_time);
        for (i, (in0, base, _)) in plan.iter().enumerate() {
            let reduction = i % 2 == 1;
            if in0 > base {
                total += 2 * c * c + 2 * c;
            }
            let cell = if reduction { &self.reduce } else { &self.normal };
            for inputs in cell {
                for (name, src) in inputs {
                    let spec: OperatorSpec = name.parse()?;
                    let reduction_edge = reduction && *src < 2;
                    total += if spec.kind == OpKind::Skip && reduction_edge {
                        2 * c * c + 2 * c
                    } else {
                        spec.param_count(cfg.channels) as u64
                    };
                }
            }
        }
        Ok(total)
    }
}

/// Shape/width context needed to turn a genotype into a network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompileConfig {
    pub channels: usize,
    pub classes: usize,
    pub input_slices: usize,
    pub input_time: usize,
}

impl CompileConfig {
    pub fn from_meta(meta: &GenotypeMeta, input_slices: usize, input_time: usize) -> Self {
        CompileConfig {
            channels: meta.channels,
            classes: meta.classes,
            input_slices,
            input_time,
        }
    }

    fn to_net_config(&self, g: &Genotype) -> MetaNetConfig {
        MetaNetConfig {
            channels: self.channels,
            classes: self.classes,
            blocks: g.meta.blocks,
            nodes: g.meta.nodes,
            input_slices: self.input_slices,
            input_time: self.input_time,
        }
    }
}

/// One retained operator instance inside a compiled cell.
struct CompiledInput<E: Elem> {
    /// Edge index in the full cell template, used for checkpoint naming.
    edge: usize,
    src: usize,
    name: String,
    op: OpBlock<E>,
}

pub struct CompiledCell<E: Elem> {
    pub reduction: bool,
    pre0: Option<FactorizedReduce<E>>,
    /// Per intermediate node, its two retained inputs.
    nodes: Vec<Vec<CompiledInput<E>>>,
}

/// A standalone discrete network compiled from a genotype: same stem, cell
/// stacking, and head as the search network, but each node sums exactly its
/// two retained operators. Checkpoint names match the search network's so
/// weights can flow either way.
pub struct CompiledNet<E: Elem> {
    pub cfg: MetaNetConfig,
    pub genotype: Genotype,
    stem: Conv2d<E>,
    cells: Vec<CompiledCell<E>>,
    head: LinearLayer<E>,
}

impl<E: Elem> std::fmt::Debug for CompiledNet<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompiledNet")
            .field("cfg", &self.cfg)
            .field("genotype", &self.genotype)
            .finish_non_exhaustive()
    }
}

pub fn compile<E: Elem>(
    g: &Genotype,
    space: &SearchSpace,
    cfg: &CompileConfig,
    seed: u64,
) -> Result<CompiledNet<E>> {
    g.validate(space)?;
    let net_cfg = cfg.to_net_config(g);
    net_cfg.validate()?;
    let topo = CellTopology::new(g.meta.nodes);
    let (plan, _) = extent_plan(g.meta.blocks, cfg.input_time);
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
    for (i, (in0, base, out)) in plan.iter().enumerate() {
        let reduction = i % 2 == 1;
        let pre0 = if in0 > base {
            Some(FactorizedReduce::new(&mut rng, cfg.channels))
        } else {
            None
        };
        let template = if reduction { &g.reduce } else { &g.normal };
        let mut nodes = Vec::with_capacity(g.meta.nodes);
        for (n, inputs) in template.iter().enumerate() {
            let mut retained = Vec::with_capacity(2);
            for (name, src) in inputs {
                let spec: OperatorSpec = name.parse()?;
                let reduction_edge = reduction && *src < 2;
                // Inputs sit at the cell's base extent; intermediate values in
                // a reduction cell are already halved.
                let avail = if reduction && *src >= 2 { *out } else { *base };
                if spec.effective_time_extent() > avail {
                    return Err(Error::Genotype(format!(
                        "cell {i} edge {src}->{}: operator '{name}' spans {} time points but only {avail} are available",
                        2 + n,
                        spec.effective_time_extent()
                    )));
                }
                let edge = topo
                    .edges
                    .iter()
                    .position(|&(s, d)| s == *src && d == 2 + n)
                    .expect("validated source precedes node");
                let op = build_operator(&mut rng, &spec, cfg.channels, reduction_edge);
                retained.push(CompiledInput {
                    edge,
                    src: *src,
                    name: name.clone(),
                    op,
                });
            }
            nodes.push(retained);
        }
        cells.push(CompiledCell {
            reduction,
            pre0,
            nodes,
        });
    }
    let head = LinearLayer::new(&mut rng, cfg.channels, cfg.classes);
    Ok(CompiledNet {
        cfg: net_cfg,
        genotype: g.clone(),
        stem,
        cells,
        head,
    })
}

impl<E: Elem> CompiledNet<E> {
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

    pub fn forward(&mut self, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        self.check_input(x)?;
        let stem_out = self.stem.forward(x)?;
        let mut prev2 = stem_out.clone();
        let mut prev1 = stem_out;
        for cell in self.cells.iter_mut() {
            let s0 = match &mut cell.pre0 {
                Some(fr) => fr.forward(&prev2, training)?,
                None => prev2.clone(),
            };
            let s1 = prev1.clone();
            let mut states = vec![s0, s1];
            for retained in &mut cell.nodes {
                let mut parts = Vec::with_capacity(retained.len());
                for input in retained.iter_mut() {
                    parts.push(input.op.forward(&states[input.src], training)?);
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

    pub fn weight_params(&self) -> Vec<Tensor<E>> {
        let mut out = Vec::new();
        self.stem.params(&mut out);
        for cell in &self.cells {
            if let Some(fr) = &cell.pre0 {
                fr.params(&mut out);
            }
            for retained in &cell.nodes {
                for input in retained {
                    input.op.params(&mut out);
                }
            }
        }
        self.head.params(&mut out);
        out
    }

    /// Learnable-scalar count by direct enumeration of live tensors.
    pub fn param_count(&self) -> u64 {
        self.weight_params().iter().map(|t| t.numel() as u64).sum()
    }

    /// Multiply-accumulate count for one input sample, counting convolution
    /// and fully-connected layers only.
    pub fn count_macs(&self) -> Result<u64> {
        let hw = (self.cfg.input_slices, self.cfg.input_time);
        let (mut total, hw) = self.stem.macs(hw)?;
        let mut prev2 = hw;
        let mut prev1 = hw;
        for cell in &self.cells {
            let s0 = match &cell.pre0 {
                Some(fr) => {
                    let (m, out) = fr.macs(prev2)?;
                    total += m;
                    out
                }
                None => prev2,
            };
            let mut states = vec![s0, prev1];
            for retained in &cell.nodes {
                let mut node_hw = None;
                for input in retained {
                    let (m, out) = input.op.macs(states[input.src])?;
                    total += m;
                    node_hw = Some(out);
                }
                states.push(node_hw.expect("two retained inputs"));
            }
            let out = *states.last().expect("at least one node");
            prev2 = prev1;
            prev1 = out;
        }
        total += self.head.macs();
        Ok(total)
    }

    pub fn state(&self) -> Vec<StateEntry> {
        let mut out = Vec::new();
        self.stem.state("stem", &mut out);
        for (i, cell) in self.cells.iter().enumerate() {
            if let Some(fr) = &cell.pre0 {
                fr.state(&format!("cell{i}.pre0"), &mut out);
            }
            for retained in &cell.nodes {
                for input in retained {
                    let tag = op_tag(&input.name);
                    input
                        .op
                        .state(&format!("cell{i}.edge{}.{tag}", input.edge), &mut out);
                }
            }
        }
        self.head.state("head", &mut out);
        out
    }

    pub fn load_state(&mut self, entries: &[StateEntry]) -> Result<()> {
        let map: HashMap<String, &StateEntry> =
            entries.iter().map(|e| (e.name.clone(), e)).collect();
        self.stem.load_state("stem", &map)?;
        for i in 0..self.cells.len() {
            let cell = &mut self.cells[i];
            if let Some(fr) = &mut cell.pre0 {
                fr.load_state(&format!("cell{i}.pre0"), &map)?;
            }
            for retained in cell.nodes.iter_mut() {
                for input in retained.iter_mut() {
                    let tag = op_tag(&input.name);
                    input
                        .op
                        .load_state(&format!("cell{i}.edge{}.{tag}", input.edge), &map)?;
                }
            }
        }
        self.head.load_state("head", &map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::SearchSpace;
    use crate::supernet::{MetaNet, MetaNetConfig};
    use rand::Rng;

    fn tiny_space() -> SearchSpace {
        SearchSpace::from_names("tiny", &["none", "skip", "sep 3x1"]).unwrap()
    }

    fn ctx(blocks: usize, channels: usize, classes: usize) -> DeriveContext {
        DeriveContext {
            blocks,
            channels,
            classes,
            excluded_ops: Vec::new(),
        }
    }

    #[test]
    fn argmax_skips_none_and_keeps_highest() {
        let space = tiny_space();
        let topo = CellTopology::new(1);
        // [DERIVED] first edge: plain argmax; second: 'none' dominates but is
        // excluded, so skip (0.08) wins over sep (0.02).
        let probs = vec![vec![0.1, 0.9, 0.3], vec![0.9, 0.08, 0.02]];
        let nodes = derive_cell(&probs, &space, &topo).unwrap();
        assert_eq!(
            nodes,
            vec![vec![("skip".to_string(), 0), ("skip".to_string(), 1)]]
        );
    }

    #[test]
    fn edge_ranking_prefers_high_prob_then_low_op_then_low_src() {
        let space = tiny_space();
        let topo = CellTopology::new(2);
        // Node 1 owns edges from sources 0, 1, 2. Sources 0 and 1 tie on
        // probability; the op-index tie-break favors skip (index 1) over
        // sep (index 2), and the src tie-break favors source 0.
        let probs = vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.5],  // src 0: sep at 0.5
            vec![0.0, 0.5, 0.0],  // src 1: skip at 0.5 -> ranked above sep
            vec![0.0, 0.4, 0.0],  // src 2: 0.4, dropped
        ];
        let nodes = derive_cell(&probs, &space, &topo).unwrap();
        assert_eq!(
            nodes[1],
            vec![("sep 3x1".to_string(), 0), ("skip".to_string(), 1)]
        );
        // Exact tie everywhere: op index first, then source id.
        let probs = vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.5, 0.0],
            vec![0.0, 0.5, 0.0],
            vec![0.0, 0.0, 0.5],
        ];
        let nodes = derive_cell(&probs, &space, &topo).unwrap();
        assert_eq!(
            nodes[1],
            vec![("skip".to_string(), 0), ("skip".to_string(), 1)]
        );
    }

    /// Independent selection oracle: exhaustive enumeration over all pairs of
    /// incoming edges, ranked by the stated ordering.
    fn oracle_cell(
        probs: &[Vec<f64>],
        space: &SearchSpace,
        topo: &CellTopology,
    ) -> Vec<Vec<RetainedInput>> {
        let mut out = Vec::new();
        for n in 0..topo.nodes {
            // Best op per edge, scanning from the high indices down so that
            // ties resolve to the lowest index via >=.
            let mut keys: Vec<(f64, usize, usize)> = Vec::new();
            for ei in topo.edges_into(n) {
                let (src, _) = topo.edges[ei];
                let mut best = None;
                for o in (0..space.len()).rev() {
                    if space.ops[o].kind == OpKind::None {
                        continue;
                    }
                    match best {
                        None => best = Some((probs[ei][o], o)),
                        Some((bp, _)) if probs[ei][o] >= bp => best = Some((probs[ei][o], o)),
                        _ => {}
                    }
                }
                let (p, o) = best.unwrap();
                keys.push((p, o, src));
            }
            let rank = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            };
            // Enumerate every unordered pair; keep the pair whose sorted key
            // sequence is lexicographically best under the ranking.
            let mut best_pair: Option<Vec<&(f64, usize, usize)>> = None;
            for i in 0..keys.len() {
                for j in i + 1..keys.len() {
                    let mut pair = vec![&keys[i], &keys[j]];
                    pair.sort_by(|a, b| rank(a, b));
                    let better = match &best_pair {
                        None => true,
                        Some(cur) => {
                            match rank(pair[0], cur[0]) {
                                std::cmp::Ordering::Less => true,
                                std::cmp::Ordering::Greater => false,
                                std::cmp::Ordering::Equal => rank(pair[1], cur[1]).is_lt(),
                            }
                        }
                    };
                    if better {
                        best_pair = Some(pair);
                    }
                }
            }
            let mut keep: Vec<RetainedInput> = best_pair
                .unwrap()
                .iter()
                .map(|(_, o, src)| (space.ops[*o].to_string(), *src))
                .collect();
            keep.sort_by_key(|(_, src)| *src);
            out.push(keep);
        }
        out
    }

    #[test]
    fn derivation_matches_exhaustive_oracle() {
        let space = SearchSpace::desk_default();
        let topo = CellTopology::new(3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let probs: Vec<Vec<f64>> = (0..topo.edge_count())
                .map(|_| (0..space.len()).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let got = derive_cell(&probs, &space, &topo).unwrap();
            let want = oracle_cell(&probs, &space, &topo);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn json_round_trip_and_missing_field() {
        let space = SearchSpace::desk_default();
        let topo = CellTopology::new(2);
        let arch: ArchParams<f64> = ArchParams::init(&topo, space.len(), 1.5, 3).unwrap();
        let g = derive(&arch, &space, &topo, &ctx(2, 8, 4)).unwrap();
        let back = Genotype::from_json(&g.to_json()).unwrap();
        assert_eq!(g, back);

        let mut v: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
        v.as_object_mut().unwrap().remove("reduce");
        let err = Genotype::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("reduce"), "{err}");
    }

    #[test]
    fn validation_rejects_bad_structures() {
        let space = SearchSpace::desk_default();
        let topo = CellTopology::new(2);
        let arch: ArchParams<f64> = ArchParams::init(&topo, space.len(), 1.5, 3).unwrap();
        let good = derive(&arch, &space, &topo, &ctx(2, 8, 4)).unwrap();
        good.validate(&space).unwrap();

        let mut none_kept = good.clone();
        none_kept.normal[0][0].0 = "none".into();
        assert!(none_kept.validate(&space).is_err());

        let mut bad_src = good.clone();
        bad_src.normal[1][1].1 = 5;
        assert!(bad_src.validate(&space).is_err());

        let mut dup_src = good.clone();
        let s = dup_src.normal[0][0].1;
        dup_src.normal[0][1].1 = s;
        assert!(dup_src.validate(&space).is_err());

        let mut foreign = good.clone();
        foreign.normal[0][0].0 = "sep 17x1".into();
        let err = foreign.validate(&space).unwrap_err();
        assert!(err.to_string().contains("sep 17x1"), "{err}");

        let mut wrong_version = good.clone();
        wrong_version.schema_version = 9;
        assert!(wrong_version.validate(&space).is_err());
    }

    #[test]
    fn checksum_tracks_theta() {
        let space = SearchSpace::desk_default();
        let topo = CellTopology::new(2);
        let a: ArchParams<f64> = ArchParams::init(&topo, space.len(), 1.0, 5).unwrap();
        let b: ArchParams<f64> = ArchParams::init(&topo, space.len(), 1.0, 5).unwrap();
        let c: ArchParams<f64> = ArchParams::init(&topo, space.len(), 1.0, 6).unwrap();
        assert_eq!(theta_checksum(&a), theta_checksum(&b));
        assert_ne!(theta_checksum(&a), theta_checksum(&c));
    }

    #[test]
    fn analytic_count_matches_enumeration_across_widths() {
        let space = SearchSpace::desk_default();
        let topo = CellTopology::new(2);
        for &channels in &[4usize, 8, 22] {
            for seed in 0..3u64 {
                let arch: ArchParams<f64> =
                    ArchParams::init(&topo, space.len(), 1.5, 100 + seed).unwrap();
                let g = derive(&arch, &space, &topo, &ctx(2, channels, 4)).unwrap();
                let cfg = CompileConfig {
                    channels,
                    classes: 4,
                    input_slices: 3,
                    input_time: 64,
                };
                let net: CompiledNet<f64> = compile(&g, &space, &cfg, seed).unwrap();
                assert_eq!(
                    g.count_params(&space, &cfg).unwrap(),
                    net.param_count(),
                    "width {channels} seed {seed}"
                );
            }
        }
    }

    #[test]
    fn mac_count_matches_hand_computed_case() {
        // Stem 1x1 conv (C=2) on a 1x8 map: 2*8 outputs x 2 kernel elems = 32.
        // Normal cell of skips: 0. Reduce cell: two factorized reduces, each
        // two 1x1 stride-2 convs: 2 * 2 * (2*4*2) = 64. Head: 2*2 = 4.
        let space = SearchSpace::desk_default();
        let g = Genotype {
            schema_version: GENOTYPE_SCHEMA_VERSION,
            normal: vec![vec![("skip".into(), 0), ("skip".into(), 1)]],
            reduce: vec![vec![("skip".into(), 0), ("skip".into(), 1)]],
            meta: GenotypeMeta {
                blocks: 1,
                nodes: 1,
                channels: 2,
                classes: 2,
                space_id: space.id.clone(),
                theta_checksum: String::new(),
                excluded_ops: vec![],
            },
        };
        let cfg = CompileConfig {
            channels: 2,
            classes: 2,
            input_slices: 1,
            input_time: 8,
        };
        let net: CompiledNet<f64> = compile(&g, &space, &cfg, 0).unwrap();
        assert_eq!(net.count_macs().unwrap(), 100);
        // Param check on the same tiny net: stem 2*2+2=6, head 2*2+2=6,
        // two factorized reduces 2*(2*4+2*2)=24, normal skips free.
        assert_eq!(net.param_count(), 36);
        assert_eq!(g.count_params(&space, &cfg).unwrap(), 36);
    }

    #[test]
    fn compile_rejects_oversized_kernel_with_location() {
        let space = SearchSpace::full();
        let g = Genotype {
            schema_version: GENOTYPE_SCHEMA_VERSION,
            normal: vec![
                vec![("sep 33x3".into(), 0), ("skip".into(), 1)],
                vec![("skip".into(), 0), ("skip".into(), 1)],
            ],
            reduce: vec![
                vec![("skip".into(), 0), ("skip".into(), 1)],
                vec![("skip".into(), 0), ("skip".into(), 1)],
            ],
            meta: GenotypeMeta {
                blocks: 1,
                nodes: 2,
                channels: 4,
                classes: 2,
                space_id: space.id.clone(),
                theta_checksum: String::new(),
                excluded_ops: vec![],
            },
        };
        let cfg = CompileConfig {
            channels: 4,
            classes: 2,
            input_slices: 2,
            input_time: 16,
        };
        let err = compile::<f64>(&g, &space, &cfg, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cell 0") && msg.contains("sep 33x3"), "{msg}");
    }

    #[test]
    fn compiled_forward_shape_and_state_round_trip() {
        let space = SearchSpace::desk_default();
        let topo = CellTopology::new(2);
        let arch: ArchParams<f64> = ArchParams::init(&topo, space.len(), 1.5, 8).unwrap();
        let g = derive(&arch, &space, &topo, &ctx(2, 4, 3)).unwrap();
        let cfg = CompileConfig {
            channels: 4,
            classes: 3,
            input_slices: 2,
            input_time: 32,
        };
        let mut net: CompiledNet<f64> = compile(&g, &space, &cfg, 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(
            vec![2, 4, 2, 32],
            (0..2 * 4 * 2 * 32).map(|_| rng.gen::<f64>() - 0.5).collect(),
        )
        .unwrap();
        // Checkpoints store f32, so bring the source net onto the rounded
        // weights before comparing forward passes bit-for-bit.
        let state = net.state();
        net.load_state(&state).unwrap();
        let y = net.forward(&x, false).unwrap();
        assert_eq!(y.shape(), &[2, 3]);

        let mut other: CompiledNet<f64> = compile(&g, &space, &cfg, 99).unwrap();
        other.load_state(&state).unwrap();
        let y2 = other.forward(&x, false).unwrap();
        assert_eq!(y.data_vec(), y2.data_vec());

        let err = other.load_state(&[]).unwrap_err();
        assert!(err.to_string().contains("stem.weight"), "{err}");
    }

    #[test]
    fn saturated_theta_compiles_to_matching_network() {
        let cfg = MetaNetConfig {
            channels: 4,
            classes: 3,
            blocks: 1,
            nodes: 2,
            input_slices: 3,
            input_time: 32,
        };
        let space = SearchSpace::desk_default();
        let mut net: MetaNet<f64> = MetaNet::new(cfg.clone(), &space, 11).unwrap();
        assert!(net.excluded_ops.is_empty());
        let arch = net.init_arch_params(12).unwrap();

        // One-hot targets per edge; edges pushed to 'none' fall out of the
        // derived genotype and contribute only ~1e-8 to the mixture.
        let one_hot = |idx: usize| {
            let mut v = vec![0.0f64; space.len()];
            v[idx] = 20.0;
            v
        };
        let sep = space.index_of("sep 3x1").unwrap();
        let pool = space.index_of("maxpool 3x1").unwrap();
        let pool33 = space.index_of("maxpool 3x3").unwrap();
        let dil = space.index_of("dil 3x1").unwrap();
        let dil17 = space.index_of("dil 1x7").unwrap();
        let skip = space.index_of("skip").unwrap();
        let none = space.index_of("none").unwrap();
        for (e, idx) in [(0, sep), (1, pool), (2, dil), (3, none), (4, skip)] {
            arch.normal[e].set_data(&one_hot(idx));
        }
        for (e, idx) in [(0, skip), (1, sep), (2, none), (3, pool33), (4, dil17)] {
            arch.reduce[e].set_data(&one_hot(idx));
        }

        let g = derive(
            &arch,
            &net.space,
            &net.topo,
            &DeriveContext {
                blocks: cfg.blocks,
                channels: cfg.channels,
                classes: cfg.classes,
                excluded_ops: net.excluded_ops.clone(),
            },
        )
        .unwrap();
        assert_eq!(
            g.normal,
            vec![
                vec![("sep 3x1".to_string(), 0), ("maxpool 3x1".to_string(), 1)],
                vec![("dil 3x1".to_string(), 0), ("skip".to_string(), 2)],
            ]
        );
        assert_eq!(
            g.reduce,
            vec![
                vec![("skip".to_string(), 0), ("sep 3x1".to_string(), 1)],
                vec![("maxpool 3x3".to_string(), 1), ("dil 1x7".to_string(), 2)],
            ]
        );

        let ccfg = CompileConfig {
            channels: 4,
            classes: 3,
            input_slices: 3,
            input_time: 32,
        };
        let mut compiled: CompiledNet<f64> = compile(&g, &space, &ccfg, 77).unwrap();
        compiled.load_state(&net.state()).unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec(
            vec![2, 4, 3, 32],
            (0..2 * 4 * 3 * 32).map(|_| rng.gen::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let a = net.forward(&x, &arch, true).unwrap();
        let b = compiled.forward(&x, true).unwrap();
        let worst = a
            .data_vec()
            .iter()
            .zip(b.data_vec())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-4, "saturated mismatch {worst}");
    }

    #[test]
    fn all_skip_genotype_runs() {
        let space = SearchSpace::desk_default();
        let g = Genotype {
            schema_version: GENOTYPE_SCHEMA_VERSION,
            normal: vec![
                vec![("skip".into(), 0), ("skip".into(), 1)],
                vec![("skip".into(), 0), ("skip".into(), 1)],
            ],
            reduce: vec![
                vec![("skip".into(), 0), ("skip".into(), 1)],
                vec![("skip".into(), 0), ("skip".into(), 1)],
            ],
            meta: GenotypeMeta {
                blocks: 2,
                nodes: 2,
                channels: 4,
                classes: 2,
                space_id: space.id.clone(),
                theta_checksum: String::new(),
                excluded_ops: vec![],
            },
        };
        let cfg = CompileConfig {
            channels: 4,
            classes: 2,
            input_slices: 2,
            input_time: 40,
        };
        let mut net: CompiledNet<f64> = compile(&g, &space, &cfg, 3).unwrap();
        let x = Tensor::from_vec(vec![1, 4, 2, 40], vec![0.25; 4 * 2 * 40]).unwrap();
        let y = net.forward(&x, false).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(
            g.count_params(&space, &cfg).unwrap(),
            net.param_count()
        );
    }
}
