//! Candidate operator definitions, search spaces, and the parameter cost model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Operator family. Kernel sizes are written `t x s`: extent along time
/// first, extent across slices second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    None,
    Skip,
    MaxPool,
    SepConv,
    DilConv,
}

/// A single candidate operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OperatorSpec {
    pub kind: OpKind,
    /// (time, slice) kernel extents; (0, 0) for skip and none.
    pub kernel: (usize, usize),
}

impl OperatorSpec {
    pub fn none() -> Self {
        OperatorSpec {
            kind: OpKind::None,
            kernel: (0, 0),
        }
    }
    pub fn skip() -> Self {
        OperatorSpec {
            kind: OpKind::Skip,
            kernel: (0, 0),
        }
    }
    pub fn max_pool(t: usize, s: usize) -> Self {
        OperatorSpec {
            kind: OpKind::MaxPool,
            kernel: (t, s),
        }
    }
    pub fn sep_conv(t: usize, s: usize) -> Self {
        OperatorSpec {
            kind: OpKind::SepConv,
            kernel: (t, s),
        }
    }
    pub fn dil_conv(t: usize, s: usize) -> Self {
        OperatorSpec {
            kind: OpKind::DilConv,
            kernel: (t, s),
        }
    }

    /// Convolution dilation along an axis: dilated convs use 2 wherever the
    /// kernel actually extends, everything else is undilated.
    pub fn dilation(&self) -> (usize, usize) {
        if self.kind == OpKind::DilConv {
            (
                if self.kernel.0 > 1 { 2 } else { 1 },
                if self.kernel.1 > 1 { 2 } else { 1 },
            )
        } else {
            (1, 1)
        }
    }

    /// Receptive extent along time including dilation.
    pub fn effective_time_extent(&self) -> usize {
        match self.kind {
            OpKind::None | OpKind::Skip => 1,
            _ => {
                let d = self.dilation().0;
                d * (self.kernel.0.saturating_sub(1)) + 1
            }
        }
    }

    /// Exact learnable-scalar count of the operator block this spec builds
    /// (stride-1 form) at a given channel width.
    ///
    /// Separable conv applies (depthwise, pointwise, batch-norm) twice;
    /// dilated conv applies it once; pooling carries only its batch-norm
    /// affine pair; skip and none are free.
    pub fn param_count(&self, channels: usize) -> usize {
        let c = channels;
        let (t, s) = self.kernel;
        match self.kind {
            OpKind::None | OpKind::Skip => 0,
            OpKind::MaxPool => 2 * c,
            OpKind::SepConv => 2 * (t * s * c + c * c + 2 * c),
            OpKind::DilConv => t * s * c + c * c + 2 * c,
        }
    }
}

impl fmt::Display for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            OpKind::None => write!(f, "none"),
            OpKind::Skip => write!(f, "skip"),
            OpKind::MaxPool => write!(f, "maxpool {}x{}", self.kernel.0, self.kernel.1),
            OpKind::SepConv => write!(f, "sep {}x{}", self.kernel.0, self.kernel.1),
            OpKind::DilConv => write!(f, "dil {}x{}", self.kernel.0, self.kernel.1),
        }
    }
}

impl FromStr for OperatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" => return Ok(OperatorSpec::none()),
            "skip" => return Ok(OperatorSpec::skip()),
            _ => {}
        }
        let (prefix, kernel) = s
            .split_once(' ')
            .ok_or_else(|| Error::Config(format!("unknown operator '{s}'")))?;
        let (t, sl) = kernel
            .split_once('x')
            .ok_or_else(|| Error::Config(format!("operator '{s}': kernel must look like TxS")))?;
        let t: usize = t
            .parse()
            .map_err(|_| Error::Config(format!("operator '{s}': bad time extent")))?;
        let sl: usize = sl
            .parse()
            .map_err(|_| Error::Config(format!("operator '{s}': bad slice extent")))?;
        if t == 0 || sl == 0 {
            return Err(Error::Config(format!("operator '{s}': zero kernel extent")));
        }
        match prefix {
            "maxpool" => Ok(OperatorSpec::max_pool(t, sl)),
            "sep" => Ok(OperatorSpec::sep_conv(t, sl)),
            "dil" => Ok(OperatorSpec::dil_conv(t, sl)),
            _ => Err(Error::Config(format!("unknown operator family '{prefix}'"))),
        }
    }
}

impl Serialize for OperatorSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for OperatorSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An ordered set of candidate operators. Architecture parameters index
/// operators by their position in this list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    pub id: String,
    pub ops: Vec<OperatorSpec>,
}

impl SearchSpace {
    /// Compact eight-operator space sized for workstation runs.
    pub fn desk_default() -> Self {
        SearchSpace {
            id: "desk8".into(),
            ops: vec![
                OperatorSpec::none(),
                OperatorSpec::skip(),
                OperatorSpec::max_pool(3, 1),
                OperatorSpec::max_pool(3, 3),
                OperatorSpec::sep_conv(3, 1),
                OperatorSpec::sep_conv(3, 3),
                OperatorSpec::dil_conv(3, 1),
                OperatorSpec::dil_conv(1, 7),
            ],
        }
    }

    /// Full operator menu.
    pub fn full() -> Self {
        let mut ops = vec![
            OperatorSpec::none(),
            OperatorSpec::skip(),
            OperatorSpec::max_pool(3, 3),
            OperatorSpec::max_pool(3, 1),
            OperatorSpec::max_pool(5, 1),
            OperatorSpec::max_pool(1, 3),
        ];
        let conv_kernels = [
            (3, 1),
            (5, 1),
            (7, 1),
            (11, 1),
            (17, 1),
            (1, 3),
            (1, 5),
            (1, 7),
            (1, 11),
            (3, 3),
            (5, 5),
            (7, 7),
            (17, 3),
            (33, 3),
        ];
        for (t, s) in conv_kernels {
            ops.push(OperatorSpec::sep_conv(t, s));
        }
        for (t, s) in conv_kernels {
            ops.push(OperatorSpec::dil_conv(t, s));
        }
        SearchSpace { id: "full".into(), ops }
    }

    pub fn by_id(id: &str) -> Result<Self> {
        match id {
            "desk8" => Ok(Self::desk_default()),
            "full" => Ok(Self::full()),
            _ => Err(Error::Config(format!(
                "unknown search space '{id}' (expected desk8 or full)"
            ))),
        }
    }

    pub fn from_names(id: &str, names: &[&str]) -> Result<Self> {
        let ops = names
            .iter()
            .map(|n| n.parse())
            .collect::<Result<Vec<_>>>()?;
        let space = SearchSpace { id: id.into(), ops };
        space.validate()?;
        Ok(space)
    }

    /// Every space must offer exactly one skip and exactly one none, and no
    /// duplicate operators.
    pub fn validate(&self) -> Result<()> {
        let skips = self.ops.iter().filter(|o| o.kind == OpKind::Skip).count();
        let nones = self.ops.iter().filter(|o| o.kind == OpKind::None).count();
        if skips != 1 || nones != 1 {
            return Err(Error::Config(format!(
                "space '{}' must contain exactly one skip and one none (found {skips} and {nones})",
                self.id
            )));
        }
        for (i, a) in self.ops.iter().enumerate() {
            for b in &self.ops[i + 1..] {
                if a == b {
                    return Err(Error::Config(format!(
                        "space '{}' lists operator '{a}' twice",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn skip_index(&self) -> usize {
        self.ops
            .iter()
            .position(|o| o.kind == OpKind::Skip)
            .expect("validated space has a skip")
    }

    pub fn none_index(&self) -> usize {
        self.ops
            .iter()
            .position(|o| o.kind == OpKind::None)
            .expect("validated space has a none")
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.ops.iter().position(|o| o.to_string() == name)
    }

    /// Drop operators whose dilated time extent exceeds the smallest time
    /// extent any cell input will have. Returns the surviving space and the
    /// names of removed operators.
    pub fn restrict_to_time_extent(&self, min_time: usize) -> (SearchSpace, Vec<String>) {
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for op in &self.ops {
            if op.effective_time_extent() <= min_time {
                kept.push(*op);
            } else {
                dropped.push(op.to_string());
            }
        }
        (
            SearchSpace {
                id: self.id.clone(),
                ops: kept,
            },
            dropped,
        )
    }

    pub fn names(&self) -> Vec<String> {
        self.ops.iter().map(|o| o.to_string()).collect()
    }
}

/// Per-operator resource costs at a fixed channel width.
///
/// `raw` is the cost basis used by the scale constraint: exact parameter
/// counts for the convolutional operators and zero for the free kinds
/// (skip, none, pooling). `sigma` is `raw` normalized by its maximum.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub channels: usize,
    pub raw: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl CostModel {
    pub fn new(space: &SearchSpace, channels: usize) -> Self {
        let raw: Vec<f64> = space
            .ops
            .iter()
            .map(|o| match o.kind {
                OpKind::SepConv | OpKind::DilConv => o.param_count(channels) as f64,
                _ => 0.0,
            })
            .collect();
        let max = raw.iter().cloned().fold(0.0f64, f64::max);
        let sigma = if max > 0.0 {
            raw.iter().map(|r| r / max).collect()
        } else {
            vec![0.0; raw.len()]
        };
        CostModel {
            channels,
            raw,
            sigma,
        }
    }
}
