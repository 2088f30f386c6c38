//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Graphs are built eagerly by the op functions in this module and in
//! [`nn`]. Each op allocates a fresh output node holding a closure that maps
//! the output gradient to parent gradients; `backward` walks the graph in
//! reverse creation order and accumulates gradients into every tensor that
//! requires them. Leaves are plain buffers: optimizers mutate them in place
//! between steps and the next forward pass picks up the new values. In-place
//! mutation of non-leaf nodes is forbidden.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::Error;
use crate::Result;

pub mod nn;

/// Scalar element type. The search stack runs in `f32`; gradient validation
/// re-runs the same generic code in `f64`.
pub trait Elem:
    num_traits::Float
    + num_traits::NumAssign
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    const DTYPE: &'static str;
    fn from_f64c(v: f64) -> Self;
    fn to_f64c(self) -> f64;
}

impl Elem for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64c(v: f64) -> Self {
        v as f32
    }
    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64c(v: f64) -> Self {
        v
    }
    fn to_f64c(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Context handed to an op's backward closure.
pub struct BackCtx<'a, E: Elem> {
    pub grad_out: &'a [E],
    pub out: &'a [E],
    pub parents: &'a [Tensor<E>],
}

impl<E: Elem> BackCtx<'_, E> {
    /// Whether parent `i` needs a gradient at all. Closures may skip the work
    /// and return `None` for parents that don't.
    pub fn needs(&self, i: usize) -> bool {
        self.parents[i].inner.needs_grad
    }
}

type BackFn<E> = Box<dyn Fn(&BackCtx<'_, E>) -> Vec<Option<Vec<E>>>>;

struct OpNode<E: Elem> {
    parents: Vec<Tensor<E>>,
    back: BackFn<E>,
}

struct Inner<E: Elem> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    requires_grad: bool,
    /// True when a gradient has to flow through this node (it requires one
    /// itself or some ancestor does).
    needs_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    op: Option<OpNode<E>>,
}

/// Cheap handle to a graph node; clones share storage.
pub struct Tensor<E: Elem> {
    inner: Rc<Inner<E>>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Elem> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Elem> Tensor<E> {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
        needs_grad: bool,
        op: Option<OpNode<E>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                needs_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Leaf tensor that does not take gradients.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "from_vec: shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self::new_inner(shape, data, false, false, None))
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "param: shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self::new_inner(shape, data, true, true, None))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new_inner(shape, vec![E::zero(); n], false, false, None)
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: E) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new_inner(shape, vec![v; n], false, false, None)
    }

    pub fn scalar(v: E) -> Self {
        Self::new_inner(vec![1], vec![v], false, false, None)
    }

    /// Op-result constructor used by the op library.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        back: BackFn<E>,
    ) -> Self {
        let needs = parents.iter().any(|p| p.inner.needs_grad);
        let op = if needs {
            Some(OpNode { parents, back })
        } else {
            // Dead branch for gradients: drop the closure and the parent
            // handles so activations can be freed eagerly.
            None
        };
        Self::new_inner(shape, data, false, needs, op)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[E]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    pub fn data_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Single-element value.
    pub fn item(&self) -> E {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    pub fn has_non_finite(&self) -> bool {
        self.inner.data.borrow().iter().any(|v| !v.is_finite())
    }

    /// Mutate leaf data in place (optimizer updates, weight loading).
    /// Panics on non-leaf nodes: graph outputs are immutable.
    pub fn update_data(&self, f: impl FnOnce(&mut [E])) {
        assert!(
            self.inner.op.is_none(),
            "update_data on non-leaf tensor; graph outputs are immutable"
        );
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn set_data(&self, values: &[E]) {
        assert_eq!(values.len(), self.numel(), "set_data length mismatch");
        self.update_data(|d| d.copy_from_slice(values));
    }

    pub fn grad_vec(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(cur) => {
                for (c, v) in cur.iter_mut().zip(g) {
                    *c += *v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// tensor with `requires_grad`; repeated calls keep accumulating until
    /// `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.needs_grad && !self.inner.requires_grad {
            return Ok(());
        }

        // Creation ids order every node after its parents, so sorting the
        // reachable set by id yields a topological order.
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<Tensor<E>> = vec![self.clone()];
        let mut nodes: Vec<Tensor<E>> = Vec::new();
        while let Some(n) = stack.pop() {
            if !seen.insert(n.inner.id) {
                continue;
            }
            if let Some(op) = &n.inner.op {
                for p in &op.parents {
                    if p.inner.needs_grad && !seen.contains(&p.inner.id) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(n);
        }
        nodes.sort_by_key(|n| n.inner.id);

        let mut flowing: HashMap<u64, Vec<E>> = HashMap::new();
        flowing.insert(self.inner.id, vec![E::one()]);

        for node in nodes.iter().rev() {
            let Some(g) = flowing.remove(&node.inner.id) else {
                continue;
            };
            if node.inner.requires_grad {
                node.accumulate_grad(&g);
            }
            let Some(op) = &node.inner.op else { continue };
            let out_ref = node.inner.data.borrow();
            let ctx = BackCtx {
                grad_out: &g,
                out: &out_ref,
                parents: &op.parents,
            };
            let parent_grads = (op.back)(&ctx);
            debug_assert_eq!(parent_grads.len(), op.parents.len());
            for (p, pg) in op.parents.iter().zip(parent_grads) {
                if !p.inner.needs_grad {
                    continue;
                }
                let Some(pg) = pg else {
                    debug_assert!(false, "backward closure skipped a needed parent");
                    continue;
                };
                debug_assert_eq!(pg.len(), p.numel());
                match flowing.entry(p.inner.id) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        let cur = e.get_mut();
                        for (c, v) in cur.iter_mut().zip(&pg) {
                            *c += *v;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(pg);
                    }
                }
            }
        }
        Ok(())
    }
}

fn same_shape<E: Elem>(op: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("add", a, b)?;
    let out = a.with_data(|ad| b.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| *x + *y).collect()));
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|ctx| {
            let g = |need: bool| need.then(|| ctx.grad_out.to_vec());
            vec![g(ctx.needs(0)), g(ctx.needs(1))]
        }),
    ))
}

pub fn sub<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("sub", a, b)?;
    let out = a.with_data(|ad| b.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| *x - *y).collect()));
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|ctx| {
            vec![
                ctx.needs(0).then(|| ctx.grad_out.to_vec()),
                ctx.needs(1)
                    .then(|| ctx.grad_out.iter().map(|g| -*g).collect()),
            ]
        }),
    ))
}

pub fn mul<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("mul", a, b)?;
    let out = a.with_data(|ad| b.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| *x * *y).collect()));
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|ctx| {
            let ga = ctx.needs(0).then(|| {
                ctx.parents[1].with_data(|bd| {
                    ctx.grad_out
                        .iter()
                        .zip(bd)
                        .map(|(g, y)| *g * *y)
                        .collect()
                })
            });
            let gb = ctx.needs(1).then(|| {
                ctx.parents[0].with_data(|ad| {
                    ctx.grad_out
                        .iter()
                        .zip(ad)
                        .map(|(g, x)| *g * *x)
                        .collect()
                })
            });
            vec![ga, gb]
        }),
    ))
}

pub fn neg<E: Elem>(a: &Tensor<E>) -> Tensor<E> {
    let out = a.with_data(|ad| ad.iter().map(|x| -*x).collect());
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(|ctx| vec![ctx.needs(0).then(|| ctx.grad_out.iter().map(|g| -*g).collect())]),
    )
}

/// Elementwise `a*x + b` with compile-time constant coefficients.
pub fn affine<E: Elem>(x: &Tensor<E>, a: f64, b: f64) -> Tensor<E> {
    let ae = E::from_f64c(a);
    let be = E::from_f64c(b);
    let out = x.with_data(|xd| xd.iter().map(|v| ae * *v + be).collect());
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            vec![ctx
                .needs(0)
                .then(|| ctx.grad_out.iter().map(|g| ae * *g).collect())]
        }),
    )
}

/// Sum of any number of same-shaped tensors.
pub fn add_n<E: Elem>(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
    let Some(first) = parts.first() else {
        return Err(Error::Shape("add_n: empty input list".into()));
    };
    for p in parts.iter().skip(1) {
        same_shape("add_n", first, p)?;
    }
    let mut out = first.data_vec();
    for p in parts.iter().skip(1) {
        p.with_data(|pd| {
            for (o, v) in out.iter_mut().zip(pd) {
                *o += *v;
            }
        });
    }
    Ok(Tensor::from_op(
        first.shape().to_vec(),
        out,
        parts.to_vec(),
        Box::new(|ctx| {
            (0..ctx.parents.len())
                .map(|i| ctx.needs(i).then(|| ctx.grad_out.to_vec()))
                .collect()
        }),
    ))
}

pub fn relu<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let zero = E::zero();
    let out = x.with_data(|xd| xd.iter().map(|v| if *v > zero { *v } else { zero }).collect());
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            vec![ctx.needs(0).then(|| {
                ctx.grad_out
                    .iter()
                    .zip(ctx.out)
                    .map(|(g, y)| if *y > zero { *g } else { zero })
                    .collect()
            })]
        }),
    )
}

pub fn elu<E: Elem>(x: &Tensor<E>, alpha: f64) -> Tensor<E> {
    let a = E::from_f64c(alpha);
    let zero = E::zero();
    let out = x.with_data(|xd| {
        xd.iter()
            .map(|v| if *v > zero { *v } else { a * (v.exp() - E::one()) })
            .collect()
    });
    // For x <= 0 the local derivative a*exp(x) equals out + a.
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            vec![ctx.needs(0).then(|| {
                ctx.grad_out
                    .iter()
                    .zip(ctx.out)
                    .map(|(g, y)| if *y > zero { *g } else { *g * (*y + a) })
                    .collect()
            })]
        }),
    )
}

pub fn leaky_relu<E: Elem>(x: &Tensor<E>, slope: f64) -> Tensor<E> {
    let s = E::from_f64c(slope);
    let zero = E::zero();
    let out = x.with_data(|xd| {
        xd.iter()
            .map(|v| if *v > zero { *v } else { s * *v })
            .collect()
    });
    let xs = x.data_vec();
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            vec![ctx.needs(0).then(|| {
                ctx.grad_out
                    .iter()
                    .zip(&xs)
                    .map(|(g, v)| if *v > zero { *g } else { s * *g })
                    .collect()
            })]
        }),
    )
}

/// Scale every element of `x` by the `idx`-th element of the vector `s`.
pub fn scale_by_element<E: Elem>(x: &Tensor<E>, s: &Tensor<E>, idx: usize) -> Result<Tensor<E>> {
    if idx >= s.numel() {
        return Err(Error::Shape(format!(
            "scale_by_element: index {idx} out of range for {} elements",
            s.numel()
        )));
    }
    let w = s.with_data(|sd| sd[idx]);
    let out = x.with_data(|xd| xd.iter().map(|v| *v * w).collect());
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), s.clone()],
        Box::new(move |ctx| {
            let gx = ctx.needs(0).then(|| {
                let w = ctx.parents[1].with_data(|sd| sd[idx]);
                ctx.grad_out.iter().map(|g| *g * w).collect()
            });
            let gs = ctx.needs(1).then(|| {
                let dot = ctx.parents[0].with_data(|xd| {
                    let mut acc = E::zero();
                    for (g, v) in ctx.grad_out.iter().zip(xd) {
                        acc += *g * *v;
                    }
                    acc
                });
                let mut gs = vec![E::zero(); ctx.parents[1].numel()];
                gs[idx] = dot;
                gs
            });
            vec![gx, gs]
        }),
    ))
}

/// Extract one element as a scalar tensor.
pub fn select<E: Elem>(x: &Tensor<E>, idx: usize) -> Result<Tensor<E>> {
    if idx >= x.numel() {
        return Err(Error::Shape(format!(
            "select: index {idx} out of range for {} elements",
            x.numel()
        )));
    }
    let v = x.with_data(|xd| xd[idx]);
    Ok(Tensor::from_op(
        vec![1],
        vec![v],
        vec![x.clone()],
        Box::new(move |ctx| {
            vec![ctx.needs(0).then(|| {
                let mut g = vec![E::zero(); ctx.parents[0].numel()];
                g[idx] = ctx.grad_out[0];
                g
            })]
        }),
    ))
}

pub fn sum_all<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.with_data(|xd| {
        let mut acc = E::zero();
        for v in xd {
            acc += *v;
        }
        acc
    });
    Tensor::from_op(
        vec![1],
        vec![s],
        vec![x.clone()],
        Box::new(|ctx| {
            vec![ctx
                .needs(0)
                .then(|| vec![ctx.grad_out[0]; ctx.parents[0].numel()])]
        }),
    )
}

pub fn mean_all<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let n = x.numel();
    if n == 0 {
        return Err(Error::Shape("mean_all: empty tensor".into()));
    }
    let inv = E::from_f64c(1.0 / n as f64);
    let s = sum_all(x);
    Ok(affine(&s, inv.to_f64c(), 0.0))
}

/// Softmax along `axis`; other axes are treated as independent rows.
pub fn softmax<E: Elem>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    let shape = x.shape().to_vec();
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "softmax: axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let len = shape[axis];
    if len == 0 {
        return Err(Error::Shape("softmax: empty axis".into()));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![E::zero(); x.numel()];
    x.with_data(|xd| {
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = E::neg_infinity();
                for j in 0..len {
                    m = m.max(xd[base + j * inner]);
                }
                let mut s = E::zero();
                for j in 0..len {
                    let e = (xd[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                let inv = E::one() / s;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
    });
    Ok(Tensor::from_op(
        shape,
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            vec![ctx.needs(0).then(|| {
                let y = ctx.out;
                let g = ctx.grad_out;
                let mut gx = vec![E::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = E::zero();
                        for j in 0..len {
                            let k = base + j * inner;
                            dot += g[k] * y[k];
                        }
                        for j in 0..len {
                            let k = base + j * inner;
                            gx[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                gx
            })]
        }),
    ))
}
