//! Weight-bearing layers and the operator blocks assembled from them.
//!
//! Feature maps are `[batch, channel, slice, time]`: the h axis of the
//! underlying kernels runs across slices and the w axis along time, so an
//! operator kernel written `t x s` maps to conv kernel `(kh=s, kw=t)` and a
//! time-halving stride is `(1, 2)`. All convolutions are bias-free except
//! where noted; channel width is preserved by every block.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::StateEntry;
use crate::error::Error;
use crate::space::{OpKind, OperatorSpec};
use crate::tensor::nn::{
    batch_norm, conv2d, linear, maxpool2d, shift_left_w, Conv2dSpec,
};
use crate::tensor::{add, elu, Elem, Tensor};
use crate::Result;

const ELU_ALPHA: f64 = 1.0;
const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

fn sample_normal<E: Elem>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<E> {
    let dist = Normal::new(0.0, std).expect("std must be positive");
    (0..n).map(|_| E::from_f64c(dist.sample(rng))).collect()
}

fn load_entry(map: &HashMap<String, &StateEntry>, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let e = map
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
    if e.shape != shape {
        return Err(Error::Checkpoint(format!(
            "tensor '{name}': checkpoint shape {:?} does not match model shape {:?}",
            e.shape, shape
        )));
    }
    Ok(e.data.clone())
}

pub struct Conv2d<E: Elem> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub spec: Conv2dSpec,
    kernel: (usize, usize),
    cin: usize,
    cout: usize,
}

impl<E: Elem> Conv2d<E> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
        with_bias: bool,
    ) -> Self {
        let cpg = cin / spec.groups;
        let fan_in = (cpg * kernel.0 * kernel.1) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Tensor::param(
            vec![cout, cpg, kernel.0, kernel.1],
            sample_normal(rng, cout * cpg * kernel.0 * kernel.1, std),
        )
        .expect("conv weight shape");
        let bias = with_bias
            .then(|| Tensor::param(vec![cout], vec![E::zero(); cout]).expect("conv bias shape"));
        Conv2d {
            weight,
            bias,
            spec,
            kernel,
            cin,
            cout,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.spec)
    }

    pub fn params(&self, out: &mut Vec<Tensor<E>>) {
        out.push(self.weight.clone());
        if let Some(b) = &self.bias {
            out.push(b.clone());
        }
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        out.push(StateEntry::new(
            format!("{prefix}.weight"),
            self.weight.shape().to_vec(),
            self.weight.with_data(|d| d.iter().map(|v| v.to_f64c() as f32).collect()),
        ));
        if let Some(b) = &self.bias {
            out.push(StateEntry::new(
                format!("{prefix}.bias"),
                b.shape().to_vec(),
                b.with_data(|d| d.iter().map(|v| v.to_f64c() as f32).collect()),
            ));
        }
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, &StateEntry>) -> Result<()> {
        let w = load_entry(map, &format!("{prefix}.weight"), self.weight.shape())?;
        self.weight
            .set_data(&w.iter().map(|v| E::from_f64c(*v as f64)).collect::<Vec<_>>());
        if let Some(b) = &self.bias {
            let bv = load_entry(map, &format!("{prefix}.bias"), b.shape())?;
            b.set_data(&bv.iter().map(|v| E::from_f64c(*v as f64)).collect::<Vec<_>>());
        }
        Ok(())
    }

    /// Multiply-accumulate count for one sample on an `(h, w)` input map,
    /// along with the output map size.
    pub fn macs(&self, in_hw: (usize, usize)) -> Result<(u64, (usize, usize))> {
        let eff_h = self.spec.dilation.0 * (self.kernel.0 - 1) + 1;
        let eff_w = self.spec.dilation.1 * (self.kernel.1 - 1) + 1;
        let padded_h = in_hw.0 + 2 * self.spec.padding.0;
        let padded_w = in_hw.1 + 2 * self.spec.padding.1;
        if padded_h < eff_h || padded_w < eff_w {
            return Err(Error::Shape(format!(
                "conv macs: kernel ({eff_h}, {eff_w}) exceeds padded map ({padded_h}, {padded_w})"
            )));
        }
        let oh = (padded_h - eff_h) / self.spec.stride.0 + 1;
        let ow = (padded_w - eff_w) / self.spec.stride.1 + 1;
        let cpg = self.cin / self.spec.groups;
        let m = (self.cout * oh * ow) as u64 * (cpg * self.kernel.0 * self.kernel.1) as u64;
        Ok((m, (oh, ow)))
    }
}

pub struct BatchNorm2d<E: Elem> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    channels: usize,
}

impl<E: Elem> BatchNorm2d<E> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::param(vec![channels], vec![E::one(); channels]).expect("bn gamma"),
            beta: Tensor::param(vec![channels], vec![E::zero(); channels]).expect("bn beta"),
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
            channels,
        }
    }

    pub fn forward(&mut self, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        batch_norm(
            x,
            &self.gamma,
            &self.beta,
            &mut self.running_mean,
            &mut self.running_var,
            training,
            BN_MOMENTUM,
            BN_EPS,
        )
    }

    pub fn params(&self, out: &mut Vec<Tensor<E>>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        let to32 = |v: &[E]| v.iter().map(|x| x.to_f64c() as f32).collect::<Vec<f32>>();
        out.push(StateEntry::new(
            format!("{prefix}.gamma"),
            vec![self.channels],
            self.gamma.with_data(to32),
        ));
        out.push(StateEntry::new(
            format!("{prefix}.beta"),
            vec![self.channels],
            self.beta.with_data(to32),
        ));
        out.push(StateEntry::new(
            format!("{prefix}.running_mean"),
            vec![self.channels],
            to32(&self.running_mean),
        ));
        out.push(StateEntry::new(
            format!("{prefix}.running_var"),
            vec![self.channels],
            to32(&self.running_var),
        ));
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, &StateEntry>) -> Result<()> {
        let shape = [self.channels];
        let fromv =
            |v: Vec<f32>| v.iter().map(|x| E::from_f64c(*x as f64)).collect::<Vec<E>>();
        self.gamma
            .set_data(&fromv(load_entry(map, &format!("{prefix}.gamma"), &shape)?));
        self.beta
            .set_data(&fromv(load_entry(map, &format!("{prefix}.beta"), &shape)?));
        self.running_mean = fromv(load_entry(map, &format!("{prefix}.running_mean"), &shape)?);
        self.running_var = fromv(load_entry(map, &format!("{prefix}.running_var"), &shape)?);
        Ok(())
    }
}

pub struct LinearLayer<E: Elem> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    in_dim: usize,
    out_dim: usize,
}

impl<E: Elem> LinearLayer<E> {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        LinearLayer {
            weight: Tensor::param(vec![out_dim, in_dim], sample_normal(rng, out_dim * in_dim, std))
                .expect("linear weight"),
            bias: Tensor::param(vec![out_dim], vec![E::zero(); out_dim]).expect("linear bias"),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        linear(x, &self.weight, Some(&self.bias))
    }

    pub fn params(&self, out: &mut Vec<Tensor<E>>) {
        out.push(self.weight.clone());
        out.push(self.bias.clone());
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        let to32 = |v: &[E]| v.iter().map(|x| x.to_f64c() as f32).collect::<Vec<f32>>();
        out.push(StateEntry::new(
            format!("{prefix}.weight"),
            vec![self.out_dim, self.in_dim],
            self.weight.with_data(to32),
        ));
        out.push(StateEntry::new(
            format!("{prefix}.bias"),
            vec![self.out_dim],
            self.bias.with_data(to32),
        ));
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, &StateEntry>) -> Result<()> {
        let fromv =
            |v: Vec<f32>| v.iter().map(|x| E::from_f64c(*x as f64)).collect::<Vec<E>>();
        let w = load_entry(map, &format!("{prefix}.weight"), self.weight.shape())?;
        self.weight.set_data(&fromv(w));
        let b = load_entry(map, &format!("{prefix}.bias"), self.bias.shape())?;
        self.bias.set_data(&fromv(b));
        Ok(())
    }

    pub fn macs(&self) -> u64 {
        (self.in_dim * self.out_dim) as u64
    }
}

/// Time-halving skip: two offset 1x1 strided convolutions summed, then
/// batch-norm. Used both for skip edges in reduction cells and to align a
/// cell input that is one reduction behind.
pub struct FactorizedReduce<E: Elem> {
    path_a: Conv2d<E>,
    path_b: Conv2d<E>,
    bn: BatchNorm2d<E>,
}

impl<E: Elem> FactorizedReduce<E> {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let spec = Conv2dSpec {
            stride: (1, 2),
            ..Default::default()
        };
        FactorizedReduce {
            path_a: Conv2d::new(rng, channels, channels, (1, 1), spec, false),
            path_b: Conv2d::new(rng, channels, channels, (1, 1), spec, false),
            bn: BatchNorm2d::new(channels),
        }
    }

    pub fn forward(&mut self, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        let y = elu(x, ELU_ALPHA);
        let a = self.path_a.forward(&y)?;
        let b = self.path_b.forward(&shift_left_w(&y)?)?;
        self.bn.forward(&add(&a, &b)?, training)
    }

    pub fn params(&self, out: &mut Vec<Tensor<E>>) {
        self.path_a.params(out);
        self.path_b.params(out);
        self.bn.params(out);
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        self.path_a.state(&format!("{prefix}.path_a"), out);
        self.path_b.state(&format!("{prefix}.path_b"), out);
        self.bn.state(&format!("{prefix}.bn"), out);
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, &StateEntry>) -> Result<()> {
        self.path_a.load_state(&format!("{prefix}.path_a"), map)?;
        self.path_b.load_state(&format!("{prefix}.path_b"), map)?;
        self.bn.load_state(&format!("{prefix}.bn"), map)
    }

    pub fn macs(&self, in_hw: (usize, usize)) -> Result<(u64, (usize, usize))> {
        let (ma, out_hw) = self.path_a.macs(in_hw)?;
        let (mb, _) = self.path_b.macs(in_hw)?;
        Ok((ma + mb, out_hw))
    }
}

/// Separable conv stage: ELU, depthwise, pointwise, batch-norm.
pub struct SepStage<E: Elem> {
    dw: Conv2d<E>,
    pw: Conv2d<E>,
    bn: BatchNorm2d<E>,
}

impl<E: Elem> SepStage<E> {
    fn new(
        rng: &mut ChaCha8Rng,
        channels: usize,
        kernel_hw: (usize, usize),
        stride_w: usize,
        dilation_hw: (usize, usize),
    ) -> Self {
        let pad = (
            (dilation_hw.0 * (kernel_hw.0 - 1)) / 2,
            (dilation_hw.1 * (kernel_hw.1 - 1)) / 2,
        );
        let dw_spec = Conv2dSpec {
            stride: (1, stride_w),
            padding: pad,
            dilation: dilation_hw,
            groups: channels,
        };
        SepStage {
            dw: Conv2d::new(rng, channels, channels, kernel_hw, dw_spec, false),
            pw: Conv2d::new(rng, channels, channels, (1, 1), Conv2dSpec::default(), false),
            bn: BatchNorm2d::new(channels),
        }
    }

    fn forward(&mut self, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        let y = elu(x, ELU_ALPHA);
        let y = self.dw.forward(&y)?;
        let y = self.pw.forward(&y)?;
        self.bn.forward(&y, training)
    }

    fn params(&self, out: &mut Vec<Tensor<E>>) {
        self.dw.params(out);
        self.pw.params(out);
        self.bn.params(out);
    }

    fn state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        self.dw.state(&format!("{prefix}.dw"), out);
        self.pw.state(&format!("{prefix}.pw"), out);
        self.bn.state(&format!("{prefix}.bn"), out);
    }

    fn load_state(&mut self, prefix: &str, map: &HashMap<String, &StateEntry>) -> Result<()> {
        self.dw.load_state(&format!("{prefix}.dw"), map)?;
        self.pw.load_state(&format!("{prefix}.pw"), map)?;
        self.bn.load_state(&format!("{prefix}.bn"), map)
    }

    fn macs(&self, in_hw: (usize, usize)) -> Result<(u64, (usize, usize))> {
        let (m1, hw1) = self.dw.macs(in_hw)?;
        let (m2, hw2) = self.pw.macs(hw1)?;
        Ok((m1 + m2, hw2))
    }
}

/// One instantiated candidate operator.
pub enum OpBlock<E: Elem> {
    Zero { stride_w: usize },
    Identity,
    Reduce(FactorizedReduce<E>),
    Pool {
        kernel_hw: (usize, usize),
        stride_w: usize,
        bn: BatchNorm2d<E>,
    },
    Sep {
        stage1: SepStage<E>,
        stage2: SepStage<E>,
    },
    Dil { stage: SepStage<E> },
}

/// Instantiate `spec` at the given channel width. `reduction_edge` selects
/// the time-halving variant used on edges leaving a reduction cell's inputs.
pub fn build_operator<E: Elem>(
    rng: &mut ChaCha8Rng,
    spec: &OperatorSpec,
    channels: usize,
    reduction_edge: bool,
) -> OpBlock<E> {
    let stride_w = if reduction_edge { 2 } else { 1 };
    let (kt, ks) = spec.kernel;
    match spec.kind {
        OpKind::None => OpBlock::Zero { stride_w },
        OpKind::Skip => {
            if reduction_edge {
                OpBlock::Reduce(FactorizedReduce::new(rng, channels))
            } else {
                OpBlock::Identity
            }
        }
        OpKind::MaxPool => OpBlock::Pool {
            kernel_hw: (ks, kt),
            stride_w,
            bn: BatchNorm2d::new(channels),
        },
        OpKind::SepConv => OpBlock::Sep {
            stage1: SepStage::new(rng, channels, (ks, kt), stride_w, (1, 1)),
            stage2: SepStage::new(rng, channels, (ks, kt), 1, (1, 1)),
        },
        OpKind::DilConv => {
            let (dt, dsl) = spec.dilation();
            OpBlock::Dil {
                stage: SepStage::new(rng, channels, (ks, kt), stride_w, (dsl, dt)),
            }
        }
    }
}

impl<E: Elem> OpBlock<E> {
    pub fn forward(&mut self, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        match self {
            OpBlock::Zero { stride_w } => {
                let s = x.shape();
                let out_w = (s[3] + *stride_w - 1) / *stride_w;
                Ok(Tensor::zeros(vec![s[0], s[1], s[2], out_w]))
            }
            OpBlock::Identity => Ok(x.clone()),
            OpBlock::Reduce(fr) => fr.forward(x, training),
            OpBlock::Pool {
                kernel_hw,
                stride_w,
                bn,
            } => {
                let pad = ((kernel_hw.0 - 1) / 2, (kernel_hw.1 - 1) / 2);
                let y = maxpool2d(x, *kernel_hw, (1, *stride_w), pad)?;
                bn.forward(&y, training)
            }
            OpBlock::Sep { stage1, stage2 } => {
                let y = stage1.forward(x, training)?;
                stage2.forward(&y, training)
            }
            OpBlock::Dil { stage } => stage.forward(x, training),
        }
    }

    pub fn params(&self, out: &mut Vec<Tensor<E>>) {
        match self {
            OpBlock::Zero { .. } | OpBlock::Identity => {}
            OpBlock::Reduce(fr) => fr.params(out),
            OpBlock::Pool { bn, .. } => bn.params(out),
            OpBlock::Sep { stage1, stage2 } => {
                stage1.params(out);
                stage2.params(out);
            }
            OpBlock::Dil { stage } => stage.params(out),
        }
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        match self {
            OpBlock::Zero { .. } | OpBlock::Identity => {}
            OpBlock::Reduce(fr) => fr.state(prefix, out),
            OpBlock::Pool { bn, .. } => bn.state(&format!("{prefix}.bn"), out),
            OpBlock::Sep { stage1, stage2 } => {
                stage1.state(&format!("{prefix}.s1"), out);
                stage2.state(&format!("{prefix}.s2"), out);
            }
            OpBlock::Dil { stage } => stage.state(&format!("{prefix}.s1"), out),
        }
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, &StateEntry>) -> Result<()> {
        match self {
            OpBlock::Zero { .. } | OpBlock::Identity => Ok(()),
            OpBlock::Reduce(fr) => fr.load_state(prefix, map),
            OpBlock::Pool { bn, .. } => bn.load_state(&format!("{prefix}.bn"), map),
            OpBlock::Sep { stage1, stage2 } => {
                stage1.load_state(&format!("{prefix}.s1"), map)?;
                stage2.load_state(&format!("{prefix}.s2"), map)
            }
            OpBlock::Dil { stage } => stage.load_state(&format!("{prefix}.s1"), map),
        }
    }

    /// (macs, output map) for one sample on an `(h, w)` input map.
    pub fn macs(&self, in_hw: (usize, usize)) -> Result<(u64, (usize, usize))> {
        match self {
            OpBlock::Zero { stride_w } => {
                Ok((0, (in_hw.0, (in_hw.1 + stride_w - 1) / stride_w)))
            }
            OpBlock::Identity => Ok((0, in_hw)),
            OpBlock::Reduce(fr) => fr.macs(in_hw),
            OpBlock::Pool { stride_w, .. } => {
                // Output follows the same ceil rule as the strided convs.
                Ok((0, (in_hw.0, (in_hw.1 + stride_w - 1) / stride_w)))
            }
            OpBlock::Sep { stage1, stage2 } => {
                let (m1, hw1) = stage1.macs(in_hw)?;
                let (m2, hw2) = stage2.macs(hw1)?;
                Ok((m1 + m2, hw2))
            }
            OpBlock::Dil { stage } => stage.macs(in_hw),
        }
    }
}
