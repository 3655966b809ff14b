//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The graph is define-by-run: every operation on tracked inputs records a
//! node holding its parents and a backward closure, and `backward` replays
//! the graph in reverse topological order. Tensors are immutable after
//! construction except for parameter updates between steps (`set_data`) and
//! the gradient buffer filled in by `backward`.

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

/// Graph node: the inputs of the operation that produced a tensor, plus a
/// closure mapping the output gradient to per-parent contributions (`None`
/// for parents that do not track gradients).
struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Handle to a dense n-dimensional array of f64 in row-major order.
/// Cloning is cheap; clones share identity and storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if let Some(dim) = shape.iter().position(|&e| e == 0) {
        return Err(Error::InvalidShape {
            reason: format!("zero extent at dimension {dim}"),
        });
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::InvalidShape {
            reason: format!("shape {shape:?} needs {numel} elements, data has {len}"),
        });
    }
    Ok(())
}

impl Tensor {
    fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Constant leaf (does not participate in differentiation).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::new(data, shape.to_vec(), false, None))
    }

    /// Differentiable leaf; `backward` collects its gradient.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::new(data, shape.to_vec(), true, None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![v], vec![], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(vec![0.0; n], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(vec![v; n], shape.to_vec(), false, None)
    }

    pub fn ones_like(t: &Tensor) -> Tensor {
        Tensor::full(t.shape(), 1.0)
    }

    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::new(data, shape, false, Some(Node { parents, backward }))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Whether gradients flow into this tensor.
    pub fn tracks(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    /// Gradient buffer from the most recent `backward` (leaves only).
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Overwrite the stored values. Only meaningful for leaves between
    /// forward passes — existing graphs capture tensors by reference and
    /// would observe the change.
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    pub fn set_element(&self, index: usize, value: f64) {
        self.inner.data.borrow_mut()[index] = value;
    }

    /// Copy of the values as a fresh constant leaf, severed from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.to_vec(), self.inner.shape.clone(), false, None)
    }
}

// ---------------------------------------------------------------------------
// Broadcasting machinery
// ---------------------------------------------------------------------------

fn padded_dim(shape: &[usize], rank: usize, i: usize) -> usize {
    let offset = rank - shape.len();
    if i < offset {
        1
    } else {
        shape[i - offset]
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let da = padded_dim(a, rank, i);
        let db = padded_dim(b, rank, i);
        if da == db || da == 1 || db == 1 {
            out.push(da.max(db));
        } else {
            return Err(Error::BroadcastMismatch {
                op,
                dim: i,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Row-major strides of `shape` viewed inside `out` (left-padded with 1s),
/// with stride 0 on broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    let offset = rank - shape.len();
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every element of `out_shape` in row-major order, providing the flat
/// output index plus the flat offsets into two broadcast operands.
fn broadcast_walk(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut visit: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    if rank == 0 {
        visit(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for flat in 0..n {
        visit(flat, off_a, off_b);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off_a += sa[d];
            off_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off_a -= sa[d] * out_shape[d];
            off_b -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn binary_forward(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let ad = a.data();
    let bd = b.data();
    let n: usize = out_shape.iter().product();
    let mut out = vec![0.0; n];
    if a.shape() == b.shape() {
        for i in 0..n {
            out[i] = f(ad[i], bd[i]);
        }
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        broadcast_walk(&out_shape, &sa, &sb, |i, oa, ob| out[i] = f(ad[oa], bd[ob]));
    }
    Ok((out, out_shape))
}

/// Shared backward walker for broadcast binary ops: accumulates per-parent
/// gradients directly into buffers of the original shapes, which realizes the
/// sum-over-broadcast-dimensions rule.
fn binary_backward(
    grad: &[f64],
    out_shape: &[usize],
    a: &Tensor,
    b: &Tensor,
    da: impl Fn(f64, f64, f64) -> f64,
    db: impl Fn(f64, f64, f64) -> f64,
) -> Vec<Option<Vec<f64>>> {
    let ad = a.data();
    let bd = b.data();
    let want_a = a.tracks();
    let want_b = b.tracks();
    let mut ga = if want_a { vec![0.0; ad.len()] } else { Vec::new() };
    let mut gb = if want_b { vec![0.0; bd.len()] } else { Vec::new() };
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    broadcast_walk(out_shape, &sa, &sb, |i, oa, ob| {
        let g = grad[i];
        if want_a {
            ga[oa] += da(g, ad[oa], bd[ob]);
        }
        if want_b {
            gb[ob] += db(g, ad[oa], bd[ob]);
        }
    });
    vec![
        if want_a { Some(ga) } else { None },
        if want_b { Some(gb) } else { None },
    ]
}

macro_rules! binary_op {
    ($name:ident, $opname:literal, $fwd:expr, $da:expr, $db:expr) => {
        pub fn $name(&self, other: &Tensor) -> Result<Tensor> {
            let (out, out_shape) = binary_forward($opname, self, other, $fwd)?;
            if !self.tracks() && !other.tracks() {
                return Tensor::from_vec(out, &out_shape);
            }
            let a = self.clone();
            let b = other.clone();
            let os = out_shape.clone();
            Ok(Tensor::from_op(
                out,
                out_shape,
                vec![self.clone(), other.clone()],
                Box::new(move |g| binary_backward(g, &os, &a, &b, $da, $db)),
            ))
        }
    };
}

impl Tensor {
    binary_op!(add, "add", |x, y| x + y, |g, _a, _b| g, |g, _a, _b| g);
    binary_op!(sub, "sub", |x, y| x - y, |g, _a, _b| g, |g, _a, _b| -g);
    binary_op!(mul, "mul", |x, y| x * y, |g, _a, b| g * b, |g, a, _b| g * a);

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        {
            let bd = other.data();
            if let Some(i) = bd.iter().position(|&v| v == 0.0) {
                return Err(Error::DomainViolation {
                    op: "div",
                    index: i,
                    value: 0.0,
                });
            }
        }
        let (out, out_shape) = binary_forward("div", self, other, |x, y| x / y)?;
        if !self.tracks() && !other.tracks() {
            return Tensor::from_vec(out, &out_shape);
        }
        let a = self.clone();
        let b = other.clone();
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                binary_backward(
                    g,
                    &os,
                    &a,
                    &b,
                    |g, _a, b| g / b,
                    |g, a, b| -g * a / (b * b),
                )
            }),
        ))
    }

    /// Elementwise binary minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        let (out, out_shape) = binary_forward("minimum", self, other, f64::min)?;
        if !self.tracks() && !other.tracks() {
            return Tensor::from_vec(out, &out_shape);
        }
        let a = self.clone();
        let b = other.clone();
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                binary_backward(
                    g,
                    &os,
                    &a,
                    &b,
                    |g, a, b| if a <= b { g } else { 0.0 },
                    |g, a, b| if a <= b { 0.0 } else { g },
                )
            }),
        ))
    }

    fn unary(
        &self,
        out: Vec<f64>,
        grad_at: impl Fn(usize, f64, &[f64]) -> f64 + 'static,
    ) -> Tensor {
        if !self.tracks() {
            return Tensor::new(out, self.inner.shape.clone(), false, None);
        }
        let input = self.clone();
        Tensor::from_op(
            out,
            self.inner.shape.clone(),
            vec![self.clone()],
            Box::new(move |g| {
                let x = input.data();
                let dy: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| grad_at(i, gi, &x))
                    .collect();
                vec![Some(dy)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        let out = self.data().iter().map(|v| -v).collect();
        self.unary(out, |_i, g, _x| -g)
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        // d exp = exp; reuse the forward values instead of recomputing.
        let cached = out.clone();
        self.unary(out, move |i, g, _x| g * cached[i])
    }

    pub fn log(&self) -> Result<Tensor> {
        {
            let d = self.data();
            if let Some(i) = d.iter().position(|&v| v <= 0.0) {
                return Err(Error::DomainViolation {
                    op: "log",
                    index: i,
                    value: d[i],
                });
            }
        }
        let out = self.data().iter().map(|v| v.ln()).collect();
        Ok(self.unary(out, |i, g, x| g / x[i]))
    }

    pub fn square(&self) -> Tensor {
        let out = self.data().iter().map(|v| v * v).collect();
        self.unary(out, |i, g, x| 2.0 * x[i] * g)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        {
            let d = self.data();
            if let Some(i) = d.iter().position(|&v| v <= 0.0) {
                return Err(Error::DomainViolation {
                    op: "sqrt",
                    index: i,
                    value: d[i],
                });
            }
        }
        let out: Vec<f64> = self.data().iter().map(|v| v.sqrt()).collect();
        let cached = out.clone();
        Ok(self.unary(out, move |i, g, _x| g / (2.0 * cached[i])))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * c).collect();
        self.unary(out, move |_i, g, _x| g * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v + c).collect();
        self.unary(out, |_i, g, _x| g)
    }
}

// ---------------------------------------------------------------------------
// Matrix product and shape ops
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::NotMatrix {
                op: "matmul",
                shape: self.shape().to_vec(),
            });
        }
        if other.rank() != 2 {
            return Err(Error::NotMatrix {
                op: "matmul",
                shape: other.shape().to_vec(),
            });
        }
        let (r, s) = (self.shape()[0], self.shape()[1]);
        let (s2, t) = (other.shape()[0], other.shape()[1]);
        if s != s2 {
            return Err(Error::InnerDimMismatch {
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; r * t];
        {
            let ad = self.data();
            let bd = other.data();
            for i in 0..r {
                for k in 0..s {
                    let aik = ad[i * s + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bd[k * t..(k + 1) * t];
                    let orow = &mut out[i * t..(i + 1) * t];
                    for j in 0..t {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        if !self.tracks() && !other.tracks() {
            return Tensor::from_vec(out, &[r, t]);
        }
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::from_op(
            out,
            vec![r, t],
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ad = a.data();
                let bd = b.data();
                let ga = if a.tracks() {
                    // dA[i,k] = sum_j g[i,j] B[k,j]
                    let mut da = vec![0.0; r * s];
                    for i in 0..r {
                        let grow = &g[i * t..(i + 1) * t];
                        for k in 0..s {
                            let brow = &bd[k * t..(k + 1) * t];
                            let mut acc = 0.0;
                            for j in 0..t {
                                acc += grow[j] * brow[j];
                            }
                            da[i * s + k] = acc;
                        }
                    }
                    Some(da)
                } else {
                    None
                };
                let gb = if b.tracks() {
                    // dB[k,j] = sum_i A[i,k] g[i,j]
                    let mut db = vec![0.0; s * t];
                    for i in 0..r {
                        let grow = &g[i * t..(i + 1) * t];
                        for k in 0..s {
                            let aik = ad[i * s + k];
                            if aik == 0.0 {
                                continue;
                            }
                            let drow = &mut db[k * t..(k + 1) * t];
                            for j in 0..t {
                                drow[j] += aik * grow[j];
                            }
                        }
                    }
                    Some(db)
                } else {
                    None
                };
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::NotMatrix {
                op: "transpose",
                shape: self.shape().to_vec(),
            });
        }
        let (r, s) = (self.shape()[0], self.shape()[1]);
        let d = self.data();
        let mut out = vec![0.0; r * s];
        for i in 0..r {
            for j in 0..s {
                out[j * r + i] = d[i * s + j];
            }
        }
        drop(d);
        if !self.tracks() {
            return Tensor::from_vec(out, &[s, r]);
        }
        Ok(Tensor::from_op(
            out,
            vec![s, r],
            vec![self.clone()],
            Box::new(move |g| {
                let mut da = vec![0.0; r * s];
                for j in 0..s {
                    for i in 0..r {
                        da[i * s + j] = g[j * r + i];
                    }
                }
                vec![Some(da)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, self.numel())?;
        let out = self.to_vec();
        if !self.tracks() {
            return Tensor::from_vec(out, shape);
        }
        Ok(Tensor::from_op(
            out,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.to_vec())]),
        ))
    }
}

/// Concatenate along an existing axis; all other extents must agree.
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let rank = parts[0].rank();
    if axis >= rank {
        return Err(Error::InvalidAxis { axis, rank });
    }
    for p in &parts[1..] {
        if p.rank() != rank
            || p.shape()
                .iter()
                .zip(parts[0].shape())
                .enumerate()
                .any(|(d, (a, b))| d != axis && a != b)
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total: usize = out_shape.iter().product();
    let mut out = vec![0.0; total];
    let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let out_block: usize = out_shape[axis] * inner;
    for o in 0..outer {
        let mut dst = o * out_block;
        for (p, &blk) in parts.iter().zip(&blocks) {
            let d = p.data();
            out[dst..dst + blk].copy_from_slice(&d[o * blk..(o + 1) * blk]);
            dst += blk;
        }
    }
    if !parts.iter().any(|p| p.tracks()) {
        return Tensor::from_vec(out, &out_shape);
    }
    let parents: Vec<Tensor> = parts.to_vec();
    let track: Vec<bool> = parts.iter().map(|p| p.tracks()).collect();
    let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    Ok(Tensor::from_op(
        out,
        out_shape,
        parents,
        Box::new(move |g| {
            let mut grads: Vec<Option<Vec<f64>>> = track
                .iter()
                .zip(&sizes)
                .map(|(&t, &n)| if t { Some(vec![0.0; n]) } else { None })
                .collect();
            for o in 0..outer {
                let mut src = o * out_block;
                for (gi, &blk) in grads.iter_mut().zip(&blocks) {
                    if let Some(buf) = gi {
                        buf[o * blk..(o + 1) * blk].copy_from_slice(&g[src..src + blk]);
                    }
                    src += blk;
                }
            }
            grads
        }),
    ))
}

/// Stack equally-shaped tensors along a new leading axis.
pub fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(parts.len());
    for p in parts {
        let mut shape = vec![1usize];
        shape.extend_from_slice(p.shape());
        rows.push(p.reshape(&shape)?);
    }
    concat(&rows, 0)
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Std,
}

impl Tensor {
    /// Reduce over the given axes. `Std` uses the population convention
    /// (divide by n). With `keep`, reduced axes stay as extent 1.
    pub fn reduce(&self, kind: Reduce, axes: &[usize], keep: bool) -> Result<Tensor> {
        let rank = self.rank();
        let mut reduce_mask = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::InvalidAxis { axis: ax, rank });
            }
            reduce_mask[ax] = true;
        }
        let in_shape = self.shape().to_vec();
        let keep_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .map(|(d, &e)| if reduce_mask[d] { 1 } else { e })
            .collect();
        let n_red: usize = in_shape
            .iter()
            .enumerate()
            .filter(|(d, _)| reduce_mask[*d])
            .map(|(_, &e)| e)
            .product();
        let out_n: usize = keep_shape.iter().product();
        let ostrides = broadcast_strides(&keep_shape, &in_shape);
        let istrides = broadcast_strides(&in_shape, &in_shape);

        let d = self.data();
        let mut sums = vec![0.0; out_n];
        broadcast_walk(&in_shape, &ostrides, &istrides, |_f, oo, io| {
            sums[oo] += d[io];
        });
        let nf = n_red as f64;
        let (out, mean_cache): (Vec<f64>, Option<Vec<f64>>) = match kind {
            Reduce::Sum => (sums, None),
            Reduce::Mean => (sums.iter().map(|s| s / nf).collect(), None),
            Reduce::Std => {
                let means: Vec<f64> = sums.iter().map(|s| s / nf).collect();
                let mut sq = vec![0.0; out_n];
                broadcast_walk(&in_shape, &ostrides, &istrides, |_f, oo, io| {
                    let dev = d[io] - means[oo];
                    sq[oo] += dev * dev;
                });
                (sq.iter().map(|s| (s / nf).sqrt()).collect(), Some(means))
            }
        };
        drop(d);
        let out_shape: Vec<usize> = if keep {
            keep_shape.clone()
        } else {
            in_shape
                .iter()
                .enumerate()
                .filter(|(d, _)| !reduce_mask[*d])
                .map(|(_, &e)| e)
                .collect()
        };
        if !self.tracks() {
            return Tensor::from_vec(out, &out_shape);
        }
        let input = self.clone();
        let std_out = if kind == Reduce::Std {
            Some(out.clone())
        } else {
            None
        };
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let x = input.data();
                let mut dx = vec![0.0; x.len()];
                match kind {
                    Reduce::Sum => {
                        broadcast_walk(&in_shape, &ostrides, &istrides, |_f, oo, io| {
                            dx[io] += g[oo];
                        });
                    }
                    Reduce::Mean => {
                        broadcast_walk(&in_shape, &ostrides, &istrides, |_f, oo, io| {
                            dx[io] += g[oo] / nf;
                        });
                    }
                    Reduce::Std => {
                        // d std / dx_i = (x_i - mean) / (n * std); zero
                        // subgradient where the slice is constant.
                        let means = mean_cache.as_ref().unwrap();
                        let stds = std_out.as_ref().unwrap();
                        broadcast_walk(&in_shape, &ostrides, &istrides, |_f, oo, io| {
                            if stds[oo] > 0.0 {
                                dx[io] += g[oo] * (x[io] - means[oo]) / (nf * stds[oo]);
                            }
                        });
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn sum_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor> {
        self.reduce(Reduce::Sum, axes, keep)
    }

    pub fn mean_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor> {
        self.reduce(Reduce::Mean, axes, keep)
    }

    pub fn std_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor> {
        self.reduce(Reduce::Std, axes, keep)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(Reduce::Sum, &axes, false)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(Reduce::Mean, &axes, false)
    }
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Gradients keyed by leaf-tensor identity. Only `requires_grad` leaves that
/// are reachable from the loss appear.
pub struct GradMap {
    grads: HashMap<u64, Tensor>,
}

impl GradMap {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.grads.get(&t.id())
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.grads.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Reverse-mode differentiation from a scalar loss. Repeated use of a tensor
/// in the graph sums its contributions; two calls on the same graph produce
/// bit-identical results.
pub fn backward(loss: &Tensor) -> Result<GradMap> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    if !loss.tracks() {
        return Err(Error::DetachedLoss);
    }

    // Iterative post-order DFS over parents; reversed it is a topological
    // order in which every tensor is processed before the tensors it reads.
    let mut topo: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.id());
    while let Some((t, pi)) = stack.pop() {
        let parents: &[Tensor] = match &t.inner.node {
            Some(n) => &n.parents,
            None => &[],
        };
        let mut advanced = false;
        let mut i = pi;
        while i < parents.len() {
            let p = &parents[i];
            i += 1;
            if p.tracks() && !visited.contains(&p.id()) {
                visited.insert(p.id());
                let p = p.clone();
                stack.push((t.clone(), i));
                stack.push((p, 0));
                advanced = true;
                break;
            }
        }
        if !advanced {
            topo.push(t);
        }
    }

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);
    for t in topo.iter().rev() {
        let Some(g) = grads.get(&t.id()).cloned() else {
            continue;
        };
        if let Some(node) = &t.inner.node {
            let contributions = (node.backward)(&g);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (parent, contrib) in node.parents.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                debug_assert_eq!(c.len(), parent.numel());
                match grads.entry(parent.id()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        let buf = e.get_mut();
                        for (acc, v) in buf.iter_mut().zip(&c) {
                            *acc += v;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(c);
                    }
                }
            }
        }
    }

    let mut map = HashMap::new();
    for t in &topo {
        if t.requires_grad() && t.is_leaf() {
            if let Some(g) = grads.remove(&t.id()) {
                *t.inner.grad.borrow_mut() = Some(g.clone());
                let gt = Tensor::new(g, t.shape().to_vec(), false, None);
                map.insert(t.id(), gt);
            }
        }
    }
    Ok(GradMap { grads: map })
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Max relative error between analytic gradients and central finite
/// differences, over every coordinate of every parameter:
/// |analytic - (f(p+eps) - f(p-eps)) / (2 eps)| / (|analytic| + 1e-8).
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let loss = f(params)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite {
            context: "finite_diff_check objective".into(),
        });
    }
    let grads = backward(&loss)?;
    let mut max_rel: f64 = 0.0;
    for p in params {
        let analytic = match grads.get(p) {
            Some(g) => g.to_vec(),
            None => vec![0.0; p.numel()],
        };
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.set_element(i, orig + eps);
            let fp = f(params)?.item();
            p.set_element(i, orig - eps);
            let fm = f(params)?.item();
            p.set_element(i, orig);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite {
                    context: "finite_diff_check perturbed objective".into(),
                });
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

// ---------------------------------------------------------------------------
// Serialization: magic "MSDG1", u8 rank, u32 little-endian extents, then the
// values as little-endian f64 in row-major order.
// ---------------------------------------------------------------------------

pub const TENSOR_MAGIC: &[u8; 5] = b"MSDG1";

pub fn write_tensor(w: &mut dyn Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    let rank = t.rank();
    assert!(rank <= u8::MAX as usize, "rank exceeds serializable range");
    w.write_all(&[rank as u8])?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut dyn Read) -> Result<Tensor> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::DataFormat(format!(
            "bad tensor magic {magic:?}, expected {TENSOR_MAGIC:?}"
        )));
    }
    let mut rank_b = [0u8; 1];
    r.read_exact(&mut rank_b)?;
    let rank = rank_b[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        let e = u32::from_le_bytes(b) as usize;
        if e == 0 {
            return Err(Error::DataFormat("zero extent in tensor header".into()));
        }
        shape.push(e);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Tensor::from_vec(data, &shape)
}
