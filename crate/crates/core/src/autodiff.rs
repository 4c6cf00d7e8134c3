//! Reverse-mode differentiation over an explicit, per-forward-pass tape.
//!
//! Every op appends a node holding its output value and a closure mapping the
//! output gradient to gradients for each parent. Nodes are appended in
//! creation order, so walking the tape backwards is a reverse topological
//! traversal that visits every node exactly once.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{split_axis, Scalar, Tensor};

type BackwardFn<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>>>;

struct Node<S: Scalar> {
    op: &'static str,
    value: Rc<Tensor<S>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
}

/// Operation record for one forward pass.
pub struct Tape<S: Scalar = f64> {
    nodes: RefCell<Vec<Node<S>>>,
    recording: bool,
    fault: Option<&'static str>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            fault: None,
        }
    }

    /// A tape that evaluates ops without keeping backward closures.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    /// Test hook: negate the gradient produced by every node named `op`.
    pub fn inject_sign_flip(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// Leaf whose gradient flag is taken from the tensor.
    pub fn leaf(&self, t: Tensor<S>) -> Var<'_, S> {
        let requires_grad = t.requires_grad;
        self.push_node("leaf", t, requires_grad, Vec::new(), None)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&self, t: &Tensor<S>) -> Var<'_, S> {
        let mut t = t.clone();
        t.grad = None;
        t.requires_grad = true;
        self.leaf(t)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<S>) -> Var<'_, S> {
        self.leaf(t.with_requires_grad(false))
    }

    fn push_node(
        &self,
        op: &'static str,
        mut value: Tensor<S>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn<S>>,
    ) -> Var<'_, S> {
        value.grad = None;
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
            parents,
            backward,
        });
        Var { tape: self, id }
    }

    /// Records an op result. `backward` receives the output gradient and
    /// returns one optional gradient per parent, in order.
    pub(crate) fn push<F>(
        &self,
        op: &'static str,
        value: Tensor<S>,
        parents: &[Var<'_, S>],
        backward: F,
    ) -> Var<'_, S>
    where
        F: Fn(&[S]) -> Vec<Option<Vec<S>>> + 'static,
    {
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = parents.iter().all(|p| p.value().is_finite());
            debug_assert!(!inputs_finite, "{op} produced non-finite output");
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let backward: Option<BackwardFn<S>> = if requires_grad && self.recording {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(
            op,
            value,
            requires_grad,
            parents.iter().map(|p| p.id).collect(),
            backward,
        )
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !self.recording {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![S::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].as_ref() else { continue };
            let flip = self.fault == Some(node.op);
            let parent_grads = backward(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(mut pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                if flip {
                    pg.iter_mut().for_each(|v| *v = -*v);
                }
                debug_assert_eq!(pg.len(), nodes[p].value.numel(), "{}", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                    slot => *slot = Some(pg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<Tensor<S>> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Tensor::new(self.shapes[v.id].clone(), g.clone()).ok()
    }

    /// Gradient or zeros when the variable was not reached.
    pub fn get_or_zeros(&self, v: Var<'_, S>) -> Tensor<S> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }

    pub fn take_raw(&mut self, v: Var<'_, S>) -> Option<Vec<S>> {
        self.grads.get_mut(v.id)?.take()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar = f64> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Strided 2-D view used by the gemm helpers.
#[derive(Clone, Copy)]
struct Mat<'a, S> {
    data: &'a [S],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, S: Scalar> Mat<'a, S> {
    fn new(data: &'a [S], rows: usize, cols: usize, transposed: bool) -> Self {
        // `rows`/`cols` are the stored extents.
        if transposed {
            Mat { data, rows: cols, cols: rows, rs: 1, cs: cols }
        } else {
            Mat { data, rows, cols, rs: cols, cs: 1 }
        }
    }

    fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

fn mm<S: Scalar>(a: Mat<'_, S>, b: Mat<'_, S>) -> Vec<S> {
    debug_assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = vec![S::zero(); m * n];
    if m == 0 || n == 0 {
        return c;
    }
    // SAFETY: every view addresses rows*cols elements of its own slice via
    // (rs, cs) strides derived from the stored row-major extents.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            S::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn gelu_parts(x: f64) -> (f64, f64) {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_shape(&self, other: &Var<'t, S>, op: &'static str) -> Result<Vec<usize>> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::dim(op, &a, &b));
        }
        Ok(a)
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape()[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    fn gemm_op(self, other: Var<'t, S>, ta: bool, tb: bool, op: &'static str) -> Result<Self> {
        let (ar, ac) = self.matrix_dims(op)?;
        let (br, bc) = other.matrix_dims(op)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(op, &[ar, ac], &[br, bc]));
        }
        let a = self.value();
        let b = other.value();
        let out = mm(Mat::new(a.data(), ar, ac, ta), Mat::new(b.data(), br, bc, tb));
        let value = Tensor::new([m, n], out)?;
        Ok(self.tape.push(op, value, &[self, other], move |g| {
            let dc = Mat::new(g, m, n, false);
            let opa = Mat::new(a.data(), ar, ac, ta);
            let opb = Mat::new(b.data(), br, bc, tb);
            let da = if ta { mm(opb, dc.t()) } else { mm(dc, opb.t()) };
            let db = if tb { mm(dc.t(), opa) } else { mm(opa.t(), dc) };
            vec![Some(da), Some(db)]
        }))
    }

    /// `self · other` for rank-2 operands.
    pub fn matmul(self, other: Var<'t, S>) -> Result<Self> {
        self.gemm_op(other, false, false, "matmul")
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t, S>) -> Result<Self> {
        self.gemm_op(other, false, true, "matmul_t")
    }

    fn zip_op(
        self,
        other: Var<'t, S>,
        op: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<(Tensor<S>, Rc<Tensor<S>>, Rc<Tensor<S>>)> {
        let shape = self.same_shape(&other, op)?;
        let a = self.value();
        let b = other.value();
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(shape, data)?, a, b))
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Self> {
        let (v, _, _) = self.zip_op(other, "add", |x, y| x + y)?;
        Ok(self.tape.push("add", v, &[self, other], |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Self> {
        let (v, _, _) = self.zip_op(other, "sub", |x, y| x - y)?;
        Ok(self.tape.push("sub", v, &[self, other], |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]
        }))
    }

    /// Element-wise product.
    pub fn mul(self, other: Var<'t, S>) -> Result<Self> {
        let (v, a, b) = self.zip_op(other, "mul", |x, y| x * y)?;
        Ok(self.tape.push("mul", v, &[self, other], move |g| {
            let da = g.iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
            let db = g.iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
            vec![Some(da), Some(db)]
        }))
    }

    /// Multiplication by a scalar constant.
    pub fn scale(self, c: f64) -> Self {
        let c = S::of(c);
        let a = self.value();
        let data = a.data().iter().map(|&x| x * c).collect();
        let v = Tensor::new(a.shape().to_vec(), data).expect("same extents");
        self.tape.push("scale", v, &[self], move |g| {
            vec![Some(g.iter().map(|&g| g * c).collect())]
        })
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> (f64, f64),
    ) -> Self {
        let a = self.value();
        let (vals, derivs): (Vec<S>, Vec<S>) = a
            .data()
            .iter()
            .map(|&x| {
                let (y, d) = f(x.f64());
                (S::of(y), S::of(d))
            })
            .unzip();
        let v = Tensor::new(a.shape().to_vec(), vals).expect("same extents");
        self.tape.push(op, v, &[self], move |g| {
            vec![Some(g.iter().zip(&derivs).map(|(&g, &d)| g * d).collect())]
        })
    }

    pub fn relu(self) -> Self {
        self.unary("relu", |x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Self {
        self.unary("gelu", gelu_parts)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let a = self.value();
        let v = (*a).clone().reshaped(shape)?;
        Ok(self.tape.push("reshape", v, &[self], |g| vec![Some(g.to_vec())]))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(self) -> Result<Self> {
        let (r, c) = self.matrix_dims("transpose")?;
        let a = self.value();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        let v = Tensor::new([c, r], out)?;
        Ok(self.tape.push("transpose", v, &[self], move |g| {
            let mut d = vec![S::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(d)]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, S>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat axis {axis} on rank {}", base.len())));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let mut a = s.clone();
            let mut b = base.clone();
            a[axis] = 0;
            b[axis] = 0;
            if a != b {
                return Err(Error::dim("concat", &base, &s));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let v = Tensor::new(shape, out)?;
        let tape = first.tape;
        Ok(tape.push("concat", v, parts, move |g| {
            let mut grads: Vec<Vec<S>> = extents
                .iter()
                .map(|&e| Vec::with_capacity(outer * e * inner))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gr, &e) in grads.iter_mut().zip(&extents) {
                    gr.extend_from_slice(&g[off..off + e * inner]);
                    off += e * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let len = end - start;
        let a = self.value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut new_shape = shape.clone();
        new_shape[axis] = len;
        let v = Tensor::new(new_shape, out)?;
        let numel = a.numel();
        Ok(self.tape.push("slice", v, &[self], move |g| {
            let mut d = vec![S::zero(); numel];
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                d[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(d)]
        }))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("sum_axis {axis} on {shape:?}")));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let a = self.value();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &a.data()[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let v = Tensor::new(new_shape, out)?;
        Ok(self.tape.push("sum_axis", v, &[self], move |g| {
            let mut d = Vec::with_capacity(outer * ext * inner);
            for o in 0..outer {
                for _ in 0..ext {
                    d.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(d)]
        }))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Self {
        let a = self.value();
        let total = a.data().iter().copied().sum();
        let n = a.numel();
        self.tape.push("sum", Tensor::scalar(total), &[self], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(self) -> Self {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Tiles the tensor `times` times along `axis`.
    pub fn repeat_axis(self, axis: usize, times: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("repeat_axis {axis} on {shape:?}")));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let block = ext * inner;
        let a = self.value();
        let mut out = Vec::with_capacity(outer * block * times);
        for o in 0..outer {
            for _ in 0..times {
                out.extend_from_slice(&a.data()[o * block..(o + 1) * block]);
            }
        }
        let mut new_shape = shape.clone();
        new_shape[axis] = ext * times;
        let v = Tensor::new(new_shape, out)?;
        Ok(self.tape.push("repeat_axis", v, &[self], move |g| {
            let mut d = vec![S::zero(); outer * block];
            for o in 0..outer {
                for t in 0..times {
                    let src = &g[(o * times + t) * block..(o * times + t + 1) * block];
                    for (dd, &s) in d[o * block..(o + 1) * block].iter_mut().zip(src) {
                        *dd = *dd + s;
                    }
                }
            }
            vec![Some(d)]
        }))
    }

    fn lanes(&self, axis: usize, op: &str) -> Result<(Vec<usize>, usize, usize, usize)> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("{op} axis {axis} on {shape:?}")));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        Ok((shape, outer, ext, inner))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(self, axis: usize) -> Result<Self> {
        let (shape, outer, ext, inner) = self.lanes(axis, "softmax")?;
        let a = self.value();
        let x = a.data();
        let mut y = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * ext + e) * inner + i;
                let m = (0..ext).map(|e| x[idx(e)]).fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for e in 0..ext {
                    let v = (x[idx(e)] - m).exp();
                    y[idx(e)] = v;
                    z = z + v;
                }
                for e in 0..ext {
                    y[idx(e)] = y[idx(e)] / z;
                }
            }
        }
        let out = Rc::new(Tensor::new(shape.clone(), y)?);
        let saved = Rc::clone(&out);
        Ok(self.tape.push("softmax", (*out).clone(), &[self], move |g| {
            let y = saved.data();
            let mut d = vec![S::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |e: usize| (o * ext + e) * inner + i;
                    let dot: S = (0..ext).map(|e| g[idx(e)] * y[idx(e)]).sum();
                    for e in 0..ext {
                        d[idx(e)] = y[idx(e)] * (g[idx(e)] - dot);
                    }
                }
            }
            vec![Some(d)]
        }))
    }

    /// `log(softmax(x))` along `axis`, computed via log-sum-exp.
    pub fn log_softmax(self, axis: usize) -> Result<Self> {
        let (shape, outer, ext, inner) = self.lanes(axis, "log_softmax")?;
        let a = self.value();
        let x = a.data();
        let mut y = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * ext + e) * inner + i;
                let m = (0..ext).map(|e| x[idx(e)]).fold(S::neg_infinity(), S::max);
                let z: S = (0..ext).map(|e| (x[idx(e)] - m).exp()).sum();
                let lse = m + z.ln();
                for e in 0..ext {
                    y[idx(e)] = x[idx(e)] - lse;
                }
            }
        }
        let out = Rc::new(Tensor::new(shape, y)?);
        let saved = Rc::clone(&out);
        Ok(self.tape.push("log_softmax", (*out).clone(), &[self], move |g| {
            let y = saved.data();
            let mut d = vec![S::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |e: usize| (o * ext + e) * inner + i;
                    let gs: S = (0..ext).map(|e| g[idx(e)]).sum();
                    for e in 0..ext {
                        d[idx(e)] = g[idx(e)] - y[idx(e)].exp() * gs;
                    }
                }
            }
            vec![Some(d)]
        }))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(self, gain: Var<'t, S>, bias: Var<'t, S>, eps: f64) -> Result<Self> {
        let shape = self.shape();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Contract("layer_norm on a scalar".into()))?;
        for p in [gain, bias] {
            if p.shape() != [d] {
                return Err(Error::dim("layer_norm", &shape, &p.shape()));
            }
        }
        let rows = shape.iter().product::<usize>() / d.max(1);
        let x = self.value();
        let gv = gain.value();
        let bv = bias.value();
        let eps = S::of(eps);
        let dn = S::of(d as f64);
        let mut xhat = vec![S::zero(); x.numel()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.tape.push("layer_norm", v, &[self, gain, bias], move |g| {
            let mut dx = vec![S::zero(); xhat.len()];
            let mut dg = vec![S::zero(); d];
            let mut db = vec![S::zero(); d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut sum_dh = S::zero();
                let mut sum_dh_h = S::zero();
                for j in 0..d {
                    let dh = gr[j] * gv.data()[j];
                    sum_dh = sum_dh + dh;
                    sum_dh_h = sum_dh_h + dh * hr[j];
                    dg[j] = dg[j] + gr[j] * hr[j];
                    db[j] = db[j] + gr[j];
                }
                for j in 0..d {
                    let dh = gr[j] * gv.data()[j];
                    dx[r * d + j] = inv_std[r] * (dh - sum_dh / dn - hr[j] * sum_dh_h / dn);
                }
            }
            vec![Some(dx), Some(dg), Some(db)]
        }))
    }

    /// Scales every row (last axis) to unit L2 norm, `x / max(‖x‖, floor)`.
    pub fn normalize_rows(self, floor: f64) -> Result<Self> {
        let shape = self.shape();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Contract("normalize_rows on a scalar".into()))?;
        let rows = shape.iter().product::<usize>() / d.max(1);
        let x = self.value();
        let floor = S::of(floor);
        let mut denom = vec![S::zero(); rows];
        let mut y = vec![S::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            let dn = n.max(floor);
            denom[r] = dn;
            for j in 0..d {
                y[r * d + j] = row[j] / dn;
            }
        }
        let out = Rc::new(Tensor::new(shape, y)?);
        let saved = Rc::clone(&out);
        Ok(self.tape.push("normalize_rows", (*out).clone(), &[self], move |g| {
            let y = saved.data();
            let mut dx = vec![S::zero(); y.len()];
            for r in 0..rows {
                let yr = &y[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let clamped = denom[r] <= floor;
                let dot: S = if clamped {
                    S::zero()
                } else {
                    yr.iter().zip(gr).map(|(&a, &b)| a * b).sum()
                };
                for j in 0..d {
                    dx[r * d + j] = (gr[j] - yr[j] * dot) / denom[r];
                }
            }
            vec![Some(dx)]
        }))
    }

    /// For a rank-2 `[n, c]` tensor, selects element `index[i]` of row `i`.
    pub fn pick(self, index: &[usize]) -> Result<Self> {
        let (n, c) = self.matrix_dims("pick")?;
        if index.len() != n {
            return Err(Error::dim("pick", &[n, c], &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&k| k >= c) {
            return Err(Error::Contract(format!("pick index {bad} out of range {c}")));
        }
        let a = self.value();
        let out = index
            .iter()
            .enumerate()
            .map(|(i, &k)| a.data()[i * c + k])
            .collect();
        let index = index.to_vec();
        let v = Tensor::new([n], out)?;
        Ok(self.tape.push("pick", v, &[self], move |g| {
            let mut d = vec![S::zero(); n * c];
            for (i, &k) in index.iter().enumerate() {
                d[i * c + k] = g[i];
            }
            vec![Some(d)]
        }))
    }

    /// Gathers `y[i] = x[source[i]]` over the flat buffer and assigns `shape`.
    pub fn gather_flat(
        self,
        source: Rc<Vec<usize>>,
        shape: impl Into<Vec<usize>>,
        op: &'static str,
    ) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != source.len() {
            return Err(Error::dim(op, &shape, &[source.len()]));
        }
        let a = self.value();
        let n_in = a.numel();
        if let Some(&bad) = source.iter().find(|&&s| s >= n_in) {
            return Err(Error::Contract(format!("{op}: source index {bad} >= {n_in}")));
        }
        let out = source.iter().map(|&s| a.data()[s]).collect();
        let v = Tensor::new(shape, out)?;
        Ok(self.tape.push(op, v, &[self], move |g| {
            let mut d = vec![S::zero(); n_in];
            for (&s, &gv) in source.iter().zip(g) {
                d[s] = d[s] + gv;
            }
            vec![Some(d)]
        }))
    }

    /// Row mixing `y[o, :] = Σ w · x[i, :]` over `(o, i, w)` triples for a
    /// rank-2 input with `rows_out` output rows.
    pub fn mix_rows(
        self,
        rows_out: usize,
        entries: Rc<Vec<(usize, usize, f64)>>,
        op: &'static str,
    ) -> Result<Self> {
        let (rows_in, c) = self.matrix_dims(op)?;
        if entries.iter().any(|&(o, i, _)| o >= rows_out || i >= rows_in) {
            return Err(Error::Contract(format!("{op}: row mixing index out of range")));
        }
        let a = self.value();
        let mut out = vec![S::zero(); rows_out * c];
        for &(o, i, w) in entries.iter() {
            let w = S::of(w);
            for j in 0..c {
                out[o * c + j] = out[o * c + j] + w * a.data()[i * c + j];
            }
        }
        let v = Tensor::new([rows_out, c], out)?;
        Ok(self.tape.push(op, v, &[self], move |g| {
            let mut d = vec![S::zero(); rows_in * c];
            for &(o, i, w) in entries.iter() {
                let w = S::of(w);
                for j in 0..c {
                    d[i * c + j] = d[i * c + j] + w * g[o * c + j];
                }
            }
            vec![Some(d)]
        }))
    }
}
