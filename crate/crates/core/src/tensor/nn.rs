//! Neural-network ops on 4-D feature maps laid out as `[batch, channel, h, w]`.
//!
//! Convolutions are cross-correlations (no kernel flip). Padding is explicit
//! and symmetric per axis; pooling pads with negative infinity so padded
//! cells never win. All reductions run in fixed index order, which keeps
//! outputs bit-identical across runs and thread counts.

use rayon::prelude::*;

use super::{Elem, Tensor};
use crate::error::Error;
use crate::Result;

/// Hyperparameters for `conv2d`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    dh: usize,
    dw: usize,
    groups: usize,
}

fn dims4<E: Elem>(name: &str, t: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "{name}: expected rank-4 [b, c, h, w], got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn out_dim(name: &str, axis: &str, input: usize, k: usize, s: usize, p: usize, d: usize) -> Result<usize> {
    let eff = d * (k - 1) + 1;
    let padded = input + 2 * p;
    if padded < eff {
        return Err(Error::Shape(format!(
            "{name}: kernel extent {eff} exceeds padded input {padded} on {axis} axis"
        )));
    }
    Ok((padded - eff) / s + 1)
}

/// Clamp the output index range `0..ow` so that `o + off` stays inside `0..w`.
#[inline]
fn valid_range(ow: usize, w: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi_i = (w as isize - off).min(ow as isize);
    if hi_i <= lo as isize {
        (0, 0)
    } else {
        (lo, hi_i as usize)
    }
}

fn conv_forward<E: Elem>(d: ConvDims, xs: &[E], ws: &[E], bias: Option<&[E]>, out: &mut [E]) {
    let cpg = d.cin / d.groups;
    let ocpg = d.cout / d.groups;
    let plane = d.oh * d.ow;
    out.par_chunks_mut(plane).enumerate().for_each(|(pi, op)| {
        let b = pi / d.cout;
        let oc = pi % d.cout;
        let grp = oc / ocpg;
        if let Some(bv) = bias {
            op.fill(bv[oc]);
        }
        for icg in 0..cpg {
            let ic = grp * cpg + icg;
            let x_plane = &xs[(b * d.cin + ic) * d.h * d.w..][..d.h * d.w];
            let w_base = (oc * cpg + icg) * d.kh * d.kw;
            for khi in 0..d.kh {
                for kwi in 0..d.kw {
                    let wv = ws[w_base + khi * d.kw + kwi];
                    let woff = (kwi * d.dw) as isize - d.pw as isize;
                    for ohi in 0..d.oh {
                        let ihi = (ohi * d.sh + khi * d.dh) as isize - d.ph as isize;
                        if ihi < 0 || ihi >= d.h as isize {
                            continue;
                        }
                        let x_row = &x_plane[ihi as usize * d.w..][..d.w];
                        let out_row = &mut op[ohi * d.ow..][..d.ow];
                        if d.sw == 1 {
                            let (lo, hi) = valid_range(d.ow, d.w, woff);
                            if lo < hi {
                                let src = &x_row[(lo as isize + woff) as usize..][..hi - lo];
                                for (o, x) in out_row[lo..hi].iter_mut().zip(src) {
                                    *o += wv * *x;
                                }
                            }
                        } else {
                            for (owi, o) in out_row.iter_mut().enumerate() {
                                let iwi = (owi * d.sw) as isize + woff;
                                if iwi >= 0 && (iwi as usize) < d.w {
                                    *o += wv * x_row[iwi as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

fn conv_grad_input<E: Elem>(d: ConvDims, ws: &[E], go: &[E], gin: &mut [E]) {
    let cpg = d.cin / d.groups;
    let ocpg = d.cout / d.groups;
    gin.par_chunks_mut(d.cin * d.h * d.w)
        .enumerate()
        .for_each(|(b, gin_b)| {
            for oc in 0..d.cout {
                let grp = oc / ocpg;
                let go_plane = &go[(b * d.cout + oc) * d.oh * d.ow..][..d.oh * d.ow];
                for icg in 0..cpg {
                    let ic = grp * cpg + icg;
                    let gin_plane = &mut gin_b[ic * d.h * d.w..][..d.h * d.w];
                    let w_base = (oc * cpg + icg) * d.kh * d.kw;
                    for khi in 0..d.kh {
                        for kwi in 0..d.kw {
                            let wv = ws[w_base + khi * d.kw + kwi];
                            let woff = (kwi * d.dw) as isize - d.pw as isize;
                            for ohi in 0..d.oh {
                                let ihi = (ohi * d.sh + khi * d.dh) as isize - d.ph as isize;
                                if ihi < 0 || ihi >= d.h as isize {
                                    continue;
                                }
                                let gin_row = &mut gin_plane[ihi as usize * d.w..][..d.w];
                                let go_row = &go_plane[ohi * d.ow..][..d.ow];
                                if d.sw == 1 {
                                    let (lo, hi) = valid_range(d.ow, d.w, woff);
                                    if lo < hi {
                                        let dst =
                                            &mut gin_row[(lo as isize + woff) as usize..][..hi - lo];
                                        for (x, g) in dst.iter_mut().zip(&go_row[lo..hi]) {
                                            *x += wv * *g;
                                        }
                                    }
                                } else {
                                    for (owi, g) in go_row.iter().enumerate() {
                                        let iwi = (owi * d.sw) as isize + woff;
                                        if iwi >= 0 && (iwi as usize) < d.w {
                                            gin_row[iwi as usize] += wv * *g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

fn conv_grad_weight<E: Elem>(d: ConvDims, xs: &[E], go: &[E], gw: &mut [E]) {
    let cpg = d.cin / d.groups;
    let ocpg = d.cout / d.groups;
    gw.par_chunks_mut(cpg * d.kh * d.kw)
        .enumerate()
        .for_each(|(oc, gw_oc)| {
            let grp = oc / ocpg;
            for b in 0..d.b {
                let go_plane = &go[(b * d.cout + oc) * d.oh * d.ow..][..d.oh * d.ow];
                for icg in 0..cpg {
                    let ic = grp * cpg + icg;
                    let x_plane = &xs[(b * d.cin + ic) * d.h * d.w..][..d.h * d.w];
                    for khi in 0..d.kh {
                        for kwi in 0..d.kw {
                            let woff = (kwi * d.dw) as isize - d.pw as isize;
                            let mut acc = E::zero();
                            for ohi in 0..d.oh {
                                let ihi =
                                    (ohi * d.sh + khi * d.dh) as isize - d.ph as isize;
                                if ihi < 0 || ihi >= d.h as isize {
                                    continue;
                                }
                                let x_row = &x_plane[ihi as usize * d.w..][..d.w];
                                let go_row = &go_plane[ohi * d.ow..][..d.ow];
                                if d.sw == 1 {
                                    let (lo, hi) = valid_range(d.ow, d.w, woff);
                                    if lo < hi {
                                        let src = &x_row[(lo as isize + woff) as usize..][..hi - lo];
                                        for (g, x) in go_row[lo..hi].iter().zip(src) {
                                            acc += *g * *x;
                                        }
                                    }
                                } else {
                                    for (owi, g) in go_row.iter().enumerate() {
                                        let iwi = (owi * d.sw) as isize + woff;
                                        if iwi >= 0 && (iwi as usize) < d.w {
                                            acc += *g * x_row[iwi as usize];
                                        }
                                    }
                                }
                            }
                            gw_oc[icg * d.kh * d.kw + khi * d.kw + kwi] += acc;
                        }
                    }
                }
            }
        });
}

/// 2-D cross-correlation over `[b, c, h, w]` maps with grouping, dilation,
/// striding and explicit symmetric zero padding.
pub fn conv2d<E: Elem>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: Conv2dSpec,
) -> Result<Tensor<E>> {
    let (b, cin, h, w) = dims4("conv2d", input)?;
    let wsh = weight.shape();
    if wsh.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d: weight must be rank-4 [cout, cin/groups, kh, kw], got {wsh:?}"
        )));
    }
    let (cout, cpg_w, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(Error::Shape(format!(
            "conv2d: groups {g} must divide cin {cin} and cout {cout}"
        )));
    }
    if cpg_w != cin / g {
        return Err(Error::Shape(format!(
            "conv2d: weight expects {cpg_w} channels per group, input provides {}",
            cin / g
        )));
    }
    if kh == 0 || kw == 0 || spec.stride.0 == 0 || spec.stride.1 == 0 {
        return Err(Error::Shape("conv2d: zero kernel or stride".into()));
    }
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} does not match cout {cout}",
                bt.shape()
            )));
        }
    }
    let oh = out_dim("conv2d", "h", h, kh, spec.stride.0, spec.padding.0, spec.dilation.0)?;
    let ow = out_dim("conv2d", "w", w, kw, spec.stride.1, spec.padding.1, spec.dilation.1)?;
    let d = ConvDims {
        b,
        cin,
        cout,
        h,
        w,
        oh,
        ow,
        kh,
        kw,
        sh: spec.stride.0,
        sw: spec.stride.1,
        ph: spec.padding.0,
        pw: spec.padding.1,
        dh: spec.dilation.0,
        dw: spec.dilation.1,
        groups: g,
    };

    let mut out = vec![E::zero(); b * cout * oh * ow];
    {
        let xr = input.data_vec();
        let wr = weight.data_vec();
        let br = bias.map(|t| t.data_vec());
        conv_forward(d, &xr, &wr, br.as_deref(), &mut out);
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        vec![b, cout, oh, ow],
        out,
        parents,
        Box::new(move |ctx| {
            let go = ctx.grad_out;
            let gx = ctx.needs(0).then(|| {
                let mut gin = vec![E::zero(); d.b * d.cin * d.h * d.w];
                ctx.parents[1].with_data(|ws| conv_grad_input(d, ws, go, &mut gin));
                gin
            });
            let gw = ctx.needs(1).then(|| {
                let mut gw = vec![E::zero(); d.cout * (d.cin / d.groups) * d.kh * d.kw];
                ctx.parents[0].with_data(|xs| conv_grad_weight(d, xs, go, &mut gw));
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                let gb = ctx.needs(2).then(|| {
                    let mut gb = vec![E::zero(); d.cout];
                    let plane = d.oh * d.ow;
                    for b in 0..d.b {
                        for oc in 0..d.cout {
                            let p = &go[(b * d.cout + oc) * plane..][..plane];
                            let mut acc = E::zero();
                            for v in p {
                                acc += *v;
                            }
                            gb[oc] += acc;
                        }
                    }
                    gb
                });
                grads.push(gb);
            }
            grads
        }),
    ))
}

/// Max pooling with negative-infinity padding; ties go to the first position
/// in row-major kernel scan order.
pub fn maxpool2d<E: Elem>(
    input: &Tensor<E>,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<E>> {
    let (b, c, h, w) = dims4("maxpool2d", input)?;
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(Error::Shape("maxpool2d: zero kernel or stride".into()));
    }
    if ph >= kh || pw >= kw {
        return Err(Error::Shape(format!(
            "maxpool2d: padding ({ph}, {pw}) must be smaller than kernel ({kh}, {kw})"
        )));
    }
    let oh = out_dim("maxpool2d", "h", h, kh, sh, ph, 1)?;
    let ow = out_dim("maxpool2d", "w", w, kw, sw, pw, 1)?;

    let n_out = b * c * oh * ow;
    let mut out = vec![E::zero(); n_out];
    let mut arg: Vec<u32> = vec![0; n_out];
    {
        let xr = input.data_vec();
        let xs = &xr[..];
        let plane = oh * ow;
        out.par_chunks_mut(plane)
            .zip(arg.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(pi, (op, ap))| {
                let x_plane_base = pi * h * w;
                let x_plane = &xs[x_plane_base..][..h * w];
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut best = E::neg_infinity();
                        let mut best_idx = u32::MAX;
                        for khi in 0..kh {
                            let ihi = (ohi * sh + khi) as isize - ph as isize;
                            if ihi < 0 || ihi >= h as isize {
                                continue;
                            }
                            for kwi in 0..kw {
                                let iwi = (owi * sw + kwi) as isize - pw as isize;
                                if iwi < 0 || iwi >= w as isize {
                                    continue;
                                }
                                let v = x_plane[ihi as usize * w + iwi as usize];
                                if v > best || best_idx == u32::MAX {
                                    best = v;
                                    best_idx = (x_plane_base + ihi as usize * w + iwi as usize)
                                        as u32;
                                }
                            }
                        }
                        op[ohi * ow + owi] = best;
                        ap[ohi * ow + owi] = best_idx;
                    }
                }
            });
    }

    let n_in = b * c * h * w;
    Ok(Tensor::from_op(
        vec![b, c, oh, ow],
        out,
        vec![input.clone()],
        Box::new(move |ctx| {
            vec![ctx.needs(0).then(|| {
                let mut gin = vec![E::zero(); n_in];
                for (g, idx) in ctx.grad_out.iter().zip(&arg) {
                    gin[*idx as usize] += *g;
                }
                gin
            })]
        }),
    ))
}

/// Batch normalization over `[b, c, h, w]` with per-channel statistics.
///
/// In training mode the op normalizes with biased batch statistics and
/// updates the running buffers in place; in eval mode it uses the running
/// buffers. Gamma and beta are learnable; running buffers are not.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<E: Elem>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &mut [E],
    running_var: &mut [E],
    training: bool,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<E>> {
    let (b, c, h, w) = dims4("batch_norm", input)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batch_norm: gamma/beta must be [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::Shape(format!(
            "batch_norm: running buffers must have {c} channels"
        )));
    }
    let n = b * h * w;
    if n == 0 {
        return Err(Error::Shape("batch_norm: empty batch".into()));
    }
    let plane = h * w;
    let epse = E::from_f64c(eps);

    // Per-channel mean and inverse stddev used for this forward.
    let mut mean = vec![E::zero(); c];
    let mut ivar = vec![E::zero(); c];
    let xr = input.data_vec();
    if training {
        let inv_n = E::from_f64c(1.0 / n as f64);
        let mom = E::from_f64c(momentum);
        let keep = E::from_f64c(1.0 - momentum);
        for ci in 0..c {
            let mut s = E::zero();
            for bi in 0..b {
                let row = &xr[(bi * c + ci) * plane..][..plane];
                for v in row {
                    s += *v;
                }
            }
            let m = s * inv_n;
            let mut vs = E::zero();
            for bi in 0..b {
                let row = &xr[(bi * c + ci) * plane..][..plane];
                for v in row {
                    let d = *v - m;
                    vs += d * d;
                }
            }
            let var = vs * inv_n;
            mean[ci] = m;
            ivar[ci] = E::one() / (var + epse).sqrt();
            running_mean[ci] = keep * running_mean[ci] + mom * m;
            running_var[ci] = keep * running_var[ci] + mom * var;
        }
    } else {
        for ci in 0..c {
            mean[ci] = running_mean[ci];
            ivar[ci] = E::one() / (running_var[ci] + epse).sqrt();
        }
    }

    let gr = gamma.data_vec();
    let br = beta.data_vec();
    let mut out = vec![E::zero(); xr.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(pi, op)| {
        let ci = pi % c;
        let (m, iv, g, be) = (mean[ci], ivar[ci], gr[ci], br[ci]);
        let row = &xr[pi * plane..][..plane];
        for (o, v) in op.iter_mut().zip(row) {
            *o = g * (*v - m) * iv + be;
        }
    });

    let mean_c = mean.clone();
    let ivar_c = ivar.clone();
    Ok(Tensor::from_op(
        vec![b, c, h, w],
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |ctx| {
            let go = ctx.grad_out;
            // Channel sums of g and g*xhat drive every gradient.
            let mut sum_g = vec![E::zero(); c];
            let mut sum_gx = vec![E::zero(); c];
            ctx.parents[0].with_data(|xs| {
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        let (m, iv) = (mean_c[ci], ivar_c[ci]);
                        let mut sg = E::zero();
                        let mut sgx = E::zero();
                        for k in 0..plane {
                            let g = go[base + k];
                            sg += g;
                            sgx += g * (xs[base + k] - m) * iv;
                        }
                        sum_g[ci] += sg;
                        sum_gx[ci] += sgx;
                    }
                }
            });
            let gx = ctx.needs(0).then(|| {
                let gamma_d = ctx.parents[1].data_vec();
                let mut gin = vec![E::zero(); b * c * plane];
                ctx.parents[0].with_data(|xs| {
                    if training {
                        let ne = E::from_f64c(n as f64);
                        let inv_n = E::one() / ne;
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * plane;
                                let (m, iv) = (mean_c[ci], ivar_c[ci]);
                                let scale = gamma_d[ci] * iv * inv_n;
                                for k in 0..plane {
                                    let xh = (xs[base + k] - m) * iv;
                                    gin[base + k] = scale
                                        * (ne * go[base + k] - sum_g[ci] - xh * sum_gx[ci]);
                                }
                            }
                        }
                    } else {
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * plane;
                                let scale = gamma_d[ci] * ivar_c[ci];
                                for k in 0..plane {
                                    gin[base + k] = scale * go[base + k];
                                }
                            }
                        }
                    }
                });
                gin
            });
            let gg = ctx.needs(1).then(|| sum_gx.clone());
            let gb = ctx.needs(2).then(|| sum_g.clone());
            vec![gx, gg, gb]
        }),
    ))
}

/// Fully connected layer: `x [b, d] @ w [k, d]^T (+ bias [k]) -> [b, k]`.
pub fn linear<E: Elem>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 2 || ws.len() != 2 {
        return Err(Error::Shape(format!(
            "linear: expected x [b, d] and weight [k, d], got {xs:?} and {ws:?}"
        )));
    }
    let (b, d) = (xs[0], xs[1]);
    let (k, dw) = (ws[0], ws[1]);
    if d != dw {
        return Err(Error::Shape(format!(
            "linear: feature dim mismatch, x has {d}, weight has {dw}"
        )));
    }
    if b == 0 {
        return Err(Error::Shape("linear: empty batch".into()));
    }
    if let Some(bt) = bias {
        if bt.shape() != [k] {
            return Err(Error::Shape(format!(
                "linear: bias shape {:?} does not match k {k}",
                bt.shape()
            )));
        }
    }

    let mut out = vec![E::zero(); b * k];
    {
        let xd = x.data_vec();
        let wd = weight.data_vec();
        let bd = bias.map(|t| t.data_vec());
        for bi in 0..b {
            let x_row = &xd[bi * d..][..d];
            let o_row = &mut out[bi * k..][..k];
            for ki in 0..k {
                let w_row = &wd[ki * d..][..d];
                let mut acc = E::zero();
                for (xv, wv) in x_row.iter().zip(w_row) {
                    acc += *xv * *wv;
                }
                o_row[ki] = acc + bd.as_ref().map_or(E::zero(), |bv| bv[ki]);
            }
        }
    }

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        vec![b, k],
        out,
        parents,
        Box::new(move |ctx| {
            let go = ctx.grad_out;
            let gx = ctx.needs(0).then(|| {
                let mut gx = vec![E::zero(); b * d];
                ctx.parents[1].with_data(|wd| {
                    for bi in 0..b {
                        let g_row = &go[bi * k..][..k];
                        let gx_row = &mut gx[bi * d..][..d];
                        for ki in 0..k {
                            let g = g_row[ki];
                            let w_row = &wd[ki * d..][..d];
                            for (o, wv) in gx_row.iter_mut().zip(w_row) {
                                *o += g * *wv;
                            }
                        }
                    }
                });
                gx
            });
            let gw = ctx.needs(1).then(|| {
                let mut gw = vec![E::zero(); k * d];
                ctx.parents[0].with_data(|xd| {
                    for bi in 0..b {
                        let g_row = &go[bi * k..][..k];
                        let x_row = &xd[bi * d..][..d];
                        for ki in 0..k {
                            let g = g_row[ki];
                            let gw_row = &mut gw[ki * d..][..d];
                            for (o, xv) in gw_row.iter_mut().zip(x_row) {
                                *o += g * *xv;
                            }
                        }
                    }
                });
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                let gb = ctx.needs(2).then(|| {
                    let mut gb = vec![E::zero(); k];
                    for bi in 0..b {
                        for ki in 0..k {
                            gb[ki] += go[bi * k + ki];
                        }
                    }
                    gb
                });
                grads.push(gb);
            }
            grads
        }),
    ))
}

/// Mean over the two spatial axes: `[b, c, h, w] -> [b, c]`.
pub fn global_avg_pool<E: Elem>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let (b, c, h, w) = dims4("global_avg_pool", input)?;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::Shape("global_avg_pool: empty spatial extent".into()));
    }
    let inv = E::from_f64c(1.0 / plane as f64);
    let mut out = vec![E::zero(); b * c];
    input.with_data(|xd| {
        for (pi, o) in out.iter_mut().enumerate() {
            let row = &xd[pi * plane..][..plane];
            let mut acc = E::zero();
            for v in row {
                acc += *v;
            }
            *o = acc * inv;
        }
    });
    Ok(Tensor::from_op(
        vec![b, c],
        out,
        vec![input.clone()],
        Box::new(move |ctx| {
            vec![ctx.needs(0).then(|| {
                let mut gin = vec![E::zero(); b * c * plane];
                for (pi, g) in ctx.grad_out.iter().enumerate() {
                    let gv = *g * inv;
                    for o in gin[pi * plane..][..plane].iter_mut() {
                        *o = gv;
                    }
                }
                gin
            })]
        }),
    ))
}

/// Mean cross-entropy between logits `[b, k]` and integer class labels.
pub fn cross_entropy<E: Elem>(logits: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!(
            "cross_entropy: expected logits [b, k], got {s:?}"
        )));
    }
    let (b, k) = (s[0], s[1]);
    if b == 0 {
        return Err(Error::Shape("cross_entropy: empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "cross_entropy: {b} rows but {} labels",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= k) {
        return Err(Error::Shape(format!(
            "cross_entropy: label {bad} out of range for {k} classes"
        )));
    }

    // Keep softmax probabilities for the backward pass.
    let mut probs = vec![E::zero(); b * k];
    let mut loss = E::zero();
    logits.with_data(|zd| {
        for bi in 0..b {
            let row = &zd[bi * k..][..k];
            let mut m = E::neg_infinity();
            for v in row {
                m = m.max(*v);
            }
            let mut s = E::zero();
            for (j, v) in row.iter().enumerate() {
                let e = (*v - m).exp();
                probs[bi * k + j] = e;
                s += e;
            }
            let inv = E::one() / s;
            for j in 0..k {
                probs[bi * k + j] *= inv;
            }
            let lse = m + s.ln();
            loss += lse - row[labels[bi]];
        }
    });
    loss /= E::from_f64c(b as f64);

    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |ctx| {
            vec![ctx.needs(0).then(|| {
                let g = ctx.grad_out[0];
                let inv_b = E::from_f64c(1.0 / b as f64);
                let mut gz = vec![E::zero(); b * k];
                for bi in 0..b {
                    for j in 0..k {
                        let onehot = if labels[bi] == j { E::one() } else { E::zero() };
                        gz[bi * k + j] = g * inv_b * (probs[bi * k + j] - onehot);
                    }
                }
                gz
            })]
        }),
    ))
}

/// Shift a `[b, c, h, w]` map one step left along `w`, zero-filling the tail.
/// Pairs a strided 1x1 conv with its offset twin without changing lengths.
pub fn shift_left_w<E: Elem>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let (b, c, h, w) = dims4("shift_left_w", input)?;
    if w < 2 {
        return Err(Error::Shape(format!(
            "shift_left_w: w axis must have at least 2 points, got {w}"
        )));
    }
    let mut out = vec![E::zero(); b * c * h * w];
    input.with_data(|xd| {
        for r in 0..b * c * h {
            let src = &xd[r * w..][..w];
            let dst = &mut out[r * w..][..w];
            dst[..w - 1].copy_from_slice(&src[1..]);
        }
    });
    Ok(Tensor::from_op(
        vec![b, c, h, w],
        out,
        vec![input.clone()],
        Box::new(move |ctx| {
            vec![ctx.needs(0).then(|| {
                let mut gin = vec![E::zero(); b * c * h * w];
                for r in 0..b * c * h {
                    let src = &ctx.grad_out[r * w..][..w];
                    let dst = &mut gin[r * w..][..w];
                    dst[1..].copy_from_slice(&src[..w - 1]);
                }
                gin
            })]
        }),
    ))
}

/// Index of the row maximum; ties go to the lower index.
pub fn argmax_row<E: Elem>(row: &[E]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
