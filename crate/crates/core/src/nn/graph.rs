//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes that
//! cannot reach a trainable parameter are marked `needs_grad = false` and are
//! skipped entirely during [`Graph::backward`].

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::kernels::{self, ConvGeom, ConvShape};
use super::params::{ParamId, ParamStore};
use super::scalar::{gemm, Scalar};
use super::tensor::Tensor;

type NodeId = usize;

#[derive(Debug, Clone, Copy)]
enum Unary<F> {
    LeakyRelu(F),
    Relu,
    Tanh,
    Sigmoid,
    Abs,
    Square,
    Sqrt,
    Log,
    Exp,
    ClampMin(F),
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    AddScalar(NodeId),
    BroadcastAdd {
        x: NodeId,
        b: NodeId,
        outer: usize,
        mid: usize,
        inner: usize,
        per_outer: bool,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        shape: ConvShape,
    },
    ConvT {
        x: NodeId,
        w: NodeId,
        shape: ConvShape,
    },
    Unary(NodeId, Unary<F>),
    Concat {
        parts: Vec<NodeId>,
        outer: usize,
        sizes: Vec<usize>,
        inner: usize,
    },
    Slice {
        x: NodeId,
        outer: usize,
        total: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Reshape(NodeId),
    Transpose12(NodeId),
    Repeat {
        x: NodeId,
        factor: usize,
    },
    AvgPool2(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    StraightThrough(NodeId),
    Fold {
        x: NodeId,
        batch: usize,
        len: usize,
        period: usize,
        rows: usize,
    },
    Frame {
        x: NodeId,
        batch: usize,
        len: usize,
        win: usize,
        hop: usize,
        offset: isize,
        frames: usize,
    },
    SelectTime {
        x: NodeId,
        batch: usize,
        steps: usize,
        t: usize,
        dim: usize,
    },
    Stack {
        parts: Vec<NodeId>,
        batch: usize,
        dim: usize,
    },
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Operation tape. Parameters listed as trainable become gradient leaves;
/// all other parameters enter as constants.
pub struct Graph<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    trainable: HashSet<ParamId>,
    param_nodes: RefCell<HashMap<ParamId, NodeId>>,
    retained: RefCell<HashSet<NodeId>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g, F: Scalar> {
    g: &'g Graph<F>,
    id: NodeId,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::inference()
    }
}

impl<F: Scalar> Graph<F> {
    /// A graph in which nothing is trainable. Forward passes only.
    pub fn inference() -> Self {
        Self::with_trainable(HashSet::new())
    }

    pub fn with_trainable(trainable: HashSet<ParamId>) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            trainable,
            param_nodes: RefCell::new(HashMap::new()),
            retained: RefCell::new(HashSet::new()),
        }
    }

    /// Keeps the gradient of an intermediate `v` for [`Gradients::of`];
    /// other non-leaf gradients are released during the backward pass.
    pub fn retain_grad(&self, v: Var<'_, F>) {
        self.retained.borrow_mut().insert(v.id);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn val(&self, id: NodeId) -> Arc<Tensor<F>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn constant(&self, t: Tensor<F>) -> Var<'_, F> {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input that is not a parameter (used by gradient checks).
    pub fn input(&self, t: Tensor<F>) -> Var<'_, F> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<'_, F> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { g: self, id: node };
        }
        let trainable = self.trainable.contains(&id);
        let nodes_len = self.len();
        {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value: store.value_rc(id),
                op: Op::Leaf,
                needs_grad: trainable,
            });
        }
        self.param_nodes.borrow_mut().insert(id, nodes_len);
        Var {
            g: self,
            id: nodes_len,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward needs a scalar loss"
        );
        let retained = self.retained.borrow();
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), F::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let dy = if retained.contains(&id) {
                grads[id].clone()
            } else {
                grads[id].take()
            };
            let Some(dy) = dy else { continue };
            backprop_node(&nodes, node, dy, &mut grads);
        }
        let params = self.param_nodes.borrow().clone();
        Gradients { grads, params }
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<F: Scalar>(
    nodes: &[Node<F>],
    node: &Node<F>,
    dy: Tensor<F>,
    grads: &mut [Option<Tensor<F>>],
) {
    let need = |id: NodeId| nodes[id].needs_grad;
    let value = |id: NodeId| -> &Tensor<F> { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if need(*b) {
                accumulate(grads, *b, dy.clone());
            }
            if need(*a) {
                accumulate(grads, *a, dy);
            }
        }
        Op::Sub(a, b) => {
            if need(*b) {
                accumulate(grads, *b, dy.map(|v| -v));
            }
            if need(*a) {
                accumulate(grads, *a, dy);
            }
        }
        Op::Mul(a, b) => {
            if need(*a) {
                accumulate(grads, *a, dy.zip_map(value(*b), |g, v| g * v));
            }
            if need(*b) {
                accumulate(grads, *b, dy.zip_map(value(*a), |g, v| g * v));
            }
        }
        Op::Scale(x, c) => {
            let c = *c;
            accumulate(grads, *x, dy.map(|v| v * c));
        }
        Op::AddScalar(x) | Op::StraightThrough(x) => accumulate(grads, *x, dy),
        Op::BroadcastAdd {
            x,
            b,
            outer,
            mid,
            inner,
            per_outer,
        } => {
            if need(*b) {
                let bshape = value(*b).shape().to_vec();
                let mut db = vec![F::zero(); bshape.iter().product()];
                let d = dy.data();
                for o in 0..*outer {
                    for m in 0..*mid {
                        let s: F = d[(o * mid + m) * inner..(o * mid + m + 1) * inner]
                            .iter()
                            .copied()
                            .sum();
                        let idx = if *per_outer { o * mid + m } else { m };
                        db[idx] = db[idx] + s;
                    }
                }
                accumulate(grads, *b, Tensor::new(&bshape, db));
            }
            if need(*x) {
                accumulate(grads, *x, dy);
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            if need(*a) {
                let mut da = vec![F::zero(); m * k];
                gemm(
                    *m,
                    *n,
                    *k,
                    dy.data(),
                    false,
                    value(*b).data(),
                    true,
                    &mut da,
                    false,
                );
                accumulate(grads, *a, Tensor::new(value(*a).shape(), da));
            }
            if need(*b) {
                let mut db = vec![F::zero(); k * n];
                gemm(
                    *k,
                    *m,
                    *n,
                    value(*a).data(),
                    true,
                    dy.data(),
                    false,
                    &mut db,
                    false,
                );
                accumulate(grads, *b, Tensor::new(value(*b).shape(), db));
            }
        }
        Op::Conv { x, w, shape } => {
            let (dx, dw) = kernels::conv1d_backward(
                value(*x).data(),
                value(*w).data(),
                dy.data(),
                shape,
                need(*x),
                need(*w),
            );
            if let Some(dx) = dx {
                accumulate(grads, *x, Tensor::new(value(*x).shape(), dx));
            }
            if let Some(dw) = dw {
                accumulate(grads, *w, Tensor::new(value(*w).shape(), dw));
            }
        }
        Op::ConvT { x, w, shape } => {
            let (dx, dw) = kernels::conv_transpose1d_backward(
                value(*x).data(),
                value(*w).data(),
                dy.data(),
                shape,
                need(*x),
                need(*w),
            );
            if let Some(dx) = dx {
                accumulate(grads, *x, Tensor::new(value(*x).shape(), dx));
            }
            if let Some(dw) = dw {
                accumulate(grads, *w, Tensor::new(value(*w).shape(), dw));
            }
        }
        Op::Unary(x, kind) => {
            let xv = value(*x);
            let yv = &node.value;
            let g = match *kind {
                Unary::LeakyRelu(s) => dy.zip_map(xv, |g, v| if v > F::zero() { g } else { g * s }),
                Unary::Relu => dy.zip_map(xv, |g, v| if v > F::zero() { g } else { F::zero() }),
                Unary::Tanh => dy.zip_map(yv, |g, y| g * (F::one() - y * y)),
                Unary::Sigmoid => dy.zip_map(yv, |g, y| g * y * (F::one() - y)),
                Unary::Abs => dy.zip_map(xv, |g, v| {
                    if v > F::zero() {
                        g
                    } else if v < F::zero() {
                        -g
                    } else {
                        F::zero()
                    }
                }),
                Unary::Square => dy.zip_map(xv, |g, v| g * (v + v)),
                Unary::Sqrt => dy.zip_map(yv, |g, y| g / (y + y)),
                Unary::Log => dy.zip_map(xv, |g, v| g / v),
                Unary::Exp => dy.zip_map(yv, |g, y| g * y),
                Unary::ClampMin(f) => dy.zip_map(xv, |g, v| if v > f { g } else { F::zero() }),
            };
            accumulate(grads, *x, g);
        }
        Op::Concat {
            parts,
            outer,
            sizes,
            inner,
        } => {
            let total: usize = sizes.iter().sum();
            let d = dy.data();
            let mut start = 0;
            for (&p, &size) in parts.iter().zip(sizes) {
                if need(p) {
                    let mut out = Vec::with_capacity(outer * size * inner);
                    for o in 0..*outer {
                        let base = (o * total + start) * inner;
                        out.extend_from_slice(&d[base..base + size * inner]);
                    }
                    accumulate(grads, p, Tensor::new(value(p).shape(), out));
                }
                start += size;
            }
        }
        Op::Slice {
            x,
            outer,
            total,
            start,
            len,
            inner,
        } => {
            let mut out = vec![F::zero(); outer * total * inner];
            let d = dy.data();
            for o in 0..*outer {
                let dst = (o * total + start) * inner;
                out[dst..dst + len * inner]
                    .copy_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, *x, Tensor::new(value(*x).shape(), out));
        }
        Op::Reshape(x) => {
            let shape = value(*x).shape().to_vec();
            accumulate(grads, *x, dy.reshaped(&shape));
        }
        Op::Transpose12(x) => accumulate(grads, *x, dy.transpose12()),
        Op::Repeat { x, factor } => {
            let xv = value(*x);
            let n = xv.len();
            let d = dy.data();
            let out = (0..n)
                .map(|i| d[i * factor..(i + 1) * factor].iter().copied().sum())
                .collect();
            accumulate(grads, *x, Tensor::new(xv.shape(), out));
        }
        Op::AvgPool2(x) => {
            let xv = value(*x);
            let len = *xv.shape().last().unwrap();
            let rows = xv.len() / len;
            let half = len / 2;
            let h = F::c(0.5);
            let d = dy.data();
            let mut out = vec![F::zero(); xv.len()];
            for r in 0..rows {
                for t in 0..half {
                    let g = d[r * half + t] * h;
                    out[r * len + 2 * t] = g;
                    out[r * len + 2 * t + 1] = g;
                }
            }
            accumulate(grads, *x, Tensor::new(xv.shape(), out));
        }
        Op::Sum(x) => {
            let g = dy.item();
            accumulate(grads, *x, Tensor::full(value(*x).shape(), g));
        }
        Op::Mean(x) => {
            let xv = value(*x);
            let g = dy.item() / F::c(xv.len() as f64);
            accumulate(grads, *x, Tensor::full(xv.shape(), g));
        }
        Op::Fold {
            x,
            batch,
            len,
            period,
            rows,
        } => {
            let d = dy.data();
            let mut out = vec![F::zero(); batch * len];
            for b in 0..*batch {
                for j in 0..*period {
                    for h in 0..*rows {
                        let src = h * period + j;
                        if src < *len {
                            out[b * len + src] = d[(b * period + j) * rows + h];
                        }
                    }
                }
            }
            accumulate(grads, *x, Tensor::new(value(*x).shape(), out));
        }
        Op::Frame {
            x,
            batch,
            len,
            win,
            hop,
            offset,
            frames,
        } => {
            let d = dy.data();
            let mut out = vec![F::zero(); batch * len];
            for b in 0..*batch {
                for f in 0..*frames {
                    let row = &d[(b * frames + f) * win..(b * frames + f + 1) * win];
                    for (i, &g) in row.iter().enumerate() {
                        let p = (f * hop + i) as isize + offset;
                        if p >= 0 && (p as usize) < *len {
                            out[b * len + p as usize] = out[b * len + p as usize] + g;
                        }
                    }
                }
            }
            accumulate(grads, *x, Tensor::new(value(*x).shape(), out));
        }
        Op::SelectTime {
            x,
            batch,
            steps,
            t,
            dim,
        } => {
            let d = dy.data();
            let mut out = vec![F::zero(); batch * steps * dim];
            for b in 0..*batch {
                let dst = (b * steps + t) * dim;
                out[dst..dst + dim].copy_from_slice(&d[b * dim..(b + 1) * dim]);
            }
            accumulate(grads, *x, Tensor::new(value(*x).shape(), out));
        }
        Op::Stack { parts, batch, dim } => {
            let steps = parts.len();
            let d = dy.data();
            for (t, &p) in parts.iter().enumerate() {
                if !need(p) {
                    continue;
                }
                let mut out = Vec::with_capacity(batch * dim);
                for b in 0..*batch {
                    let src = (b * steps + t) * dim;
                    out.extend_from_slice(&d[src..src + dim]);
                }
                accumulate(grads, p, Tensor::new(value(p).shape(), out));
            }
        }
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: HashMap<ParamId, NodeId>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf, or of a node marked with [`Graph::retain_grad`].
    pub fn of(&self, v: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads[v.id].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_ref())
    }

    /// Parameter gradients in ascending id order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<F>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&p, &n)| self.grads[n].as_ref().map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g, F: Scalar> Var<'g, F> {
    pub fn value(&self) -> Arc<Tensor<F>> {
        self.g.val(self.id)
    }

    /// Borrow the node's value without cloning the `Arc`.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        let nodes: Ref<'_, Vec<Node<F>>> = self.g.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn needs_grad(&self) -> bool {
        self.g.needs(self.id)
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.g
    }

    fn binary(self, other: Var<'g, F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        a.zip_map(&b, f)
    }

    fn ng2(self, other: Var<'g, F>) -> bool {
        self.needs_grad() || other.needs_grad()
    }

    pub fn add(self, other: Var<'g, F>) -> Var<'g, F> {
        let v = self.binary(other, |a, b| a + b);
        self.g.push(v, Op::Add(self.id, other.id), self.ng2(other))
    }

    pub fn sub(self, other: Var<'g, F>) -> Var<'g, F> {
        let v = self.binary(other, |a, b| a - b);
        self.g.push(v, Op::Sub(self.id, other.id), self.ng2(other))
    }

    pub fn mul(self, other: Var<'g, F>) -> Var<'g, F> {
        let v = self.binary(other, |a, b| a * b);
        self.g.push(v, Op::Mul(self.id, other.id), self.ng2(other))
    }

    pub fn scale(self, c: f64) -> Var<'g, F> {
        let c = F::c(c);
        let v = self.value().map(|x| x * c);
        self.g.push(v, Op::Scale(self.id, c), self.needs_grad())
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, F> {
        let c = F::c(c);
        let v = self.value().map(|x| x + c);
        self.g.push(v, Op::AddScalar(self.id), self.needs_grad())
    }

    /// Add `b` broadcast along every axis of `self` except `axis`.
    ///
    /// `b` has shape `[self.shape[axis]]`, or `[self.shape[0], self.shape[axis]]`
    /// for a per-batch bias.
    pub fn broadcast_add(self, b: Var<'g, F>, axis: usize) -> Var<'g, F> {
        let xv = self.value();
        let bv = b.value();
        let (outer, mid, inner) = split3(xv.shape(), axis);
        let per_outer = match bv.shape() {
            [m] if *m == mid => false,
            [o, m] if *m == mid && *o == outer && axis == 1 => true,
            s => panic!(
                "cannot broadcast {s:?} onto {:?} at axis {axis}",
                xv.shape()
            ),
        };
        let mut out = xv.data().to_vec();
        let bd = bv.data();
        for o in 0..outer {
            for m in 0..mid {
                let bias = if per_outer { bd[o * mid + m] } else { bd[m] };
                for v in &mut out[(o * mid + m) * inner..(o * mid + m + 1) * inner] {
                    *v = *v + bias;
                }
            }
        }
        self.g.push(
            Tensor::new(xv.shape(), out),
            Op::BroadcastAdd {
                x: self.id,
                b: b.id,
                outer,
                mid,
                inner,
                per_outer,
            },
            self.ng2(b),
        )
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(self, other: Var<'g, F>) -> Var<'g, F> {
        let a = self.value();
        let b = other.value();
        assert!(
            a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        self.g.push(
            Tensor::new(&[m, n], out),
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            self.ng2(other),
        )
    }

    /// 1-D convolution of `[B, Cin, L]` with weight `[Cout, Cin/groups, K]`.
    pub fn conv1d(self, w: Var<'g, F>, geom: ConvGeom, groups: usize) -> Var<'g, F> {
        let xv = self.value();
        let wv = w.value();
        let (batch, cin, lin) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let cout = wv.dim(0);
        assert_eq!(wv.dim(1) * groups, cin, "conv1d channel mismatch");
        assert_eq!(wv.dim(2), geom.kernel);
        assert_eq!(cout % groups, 0);
        let shape = ConvShape {
            batch,
            cin,
            cout,
            lin,
            lout: geom.conv_out_len(lin),
            groups,
            geom,
        };
        let y = kernels::conv1d_forward(xv.data(), wv.data(), &shape);
        self.g.push(
            Tensor::new(&[batch, cout, shape.lout], y),
            Op::Conv {
                x: self.id,
                w: w.id,
                shape,
            },
            self.ng2(w),
        )
    }

    /// Transposed 1-D convolution with weight `[Cin, Cout, K]`.
    pub fn conv_transpose1d(self, w: Var<'g, F>, geom: ConvGeom) -> Var<'g, F> {
        let xv = self.value();
        let wv = w.value();
        let (batch, cin, lin) = (xv.dim(0), xv.dim(1), xv.dim(2));
        assert_eq!(wv.dim(0), cin, "conv_transpose1d channel mismatch");
        assert_eq!(wv.dim(2), geom.kernel);
        assert_eq!(geom.dilation, 1);
        let cout = wv.dim(1);
        let shape = ConvShape {
            batch,
            cin,
            cout,
            lin,
            lout: geom.transpose_out_len(lin),
            groups: 1,
            geom,
        };
        let y = kernels::conv_transpose1d_forward(xv.data(), wv.data(), &shape);
        self.g.push(
            Tensor::new(&[batch, cout, shape.lout], y),
            Op::ConvT {
                x: self.id,
                w: w.id,
                shape,
            },
            self.ng2(w),
        )
    }

    fn unary(self, kind: Unary<F>, f: impl Fn(F) -> F) -> Var<'g, F> {
        let v = self.value().map(f);
        self.g.push(v, Op::Unary(self.id, kind), self.needs_grad())
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, F> {
        let s = F::c(slope);
        self.unary(
            Unary::LeakyRelu(s),
            move |v| if v > F::zero() { v } else { v * s },
        )
    }

    pub fn relu(self) -> Var<'g, F> {
        self.unary(Unary::Relu, |v| v.max(F::zero()))
    }

    pub fn tanh(self) -> Var<'g, F> {
        self.unary(Unary::Tanh, |v| v.tanh())
    }

    pub fn sigmoid(self) -> Var<'g, F> {
        self.unary(Unary::Sigmoid, |v| F::one() / (F::one() + (-v).exp()))
    }

    pub fn abs(self) -> Var<'g, F> {
        self.unary(Unary::Abs, |v| v.abs())
    }

    pub fn square(self) -> Var<'g, F> {
        self.unary(Unary::Square, |v| v * v)
    }

    pub fn sqrt(self) -> Var<'g, F> {
        self.unary(Unary::Sqrt, |v| v.sqrt())
    }

    pub fn ln(self) -> Var<'g, F> {
        self.unary(Unary::Log, |v| v.ln())
    }

    pub fn exp(self) -> Var<'g, F> {
        self.unary(Unary::Exp, |v| v.exp())
    }

    pub fn clamp_min(self, floor: f64) -> Var<'g, F> {
        let f = F::c(floor);
        self.unary(Unary::ClampMin(f), move |v| v.max(f))
    }

    pub fn concat(parts: &[Var<'g, F>], axis: usize) -> Var<'g, F> {
        let g = parts[0].g;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let (outer, _, inner) = split3(&first, axis);
        let sizes: Vec<usize> = values
            .iter()
            .map(|v| {
                let (o, m, i) = split3(v.shape(), axis);
                assert!(o == outer && i == inner, "concat shape mismatch");
                m
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &m) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * m * inner..(o + 1) * m * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|p| p.needs_grad());
        g.push(
            Tensor::new(&shape, out),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                outer,
                sizes,
                inner,
            },
            ng,
        )
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Var<'g, F> {
        let xv = self.value();
        let (outer, total, inner) = split3(xv.shape(), axis);
        assert!(start + len <= total, "slice out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            out.extend_from_slice(&xv.data()[s..s + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        self.g.push(
            Tensor::new(&shape, out),
            Op::Slice {
                x: self.id,
                outer,
                total,
                start,
                len,
                inner,
            },
            self.needs_grad(),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, F> {
        let v = (*self.value()).clone().reshaped(shape);
        self.g.push(v, Op::Reshape(self.id), self.needs_grad())
    }

    pub fn transpose12(self) -> Var<'g, F> {
        let v = self.value().transpose12();
        self.g.push(v, Op::Transpose12(self.id), self.needs_grad())
    }

    /// Nearest-neighbour repetition along the last axis.
    pub fn repeat_last(self, factor: usize) -> Var<'g, F> {
        let xv = self.value();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() *= factor;
        let out = xv
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(factor))
            .collect();
        self.g.push(
            Tensor::new(&shape, out),
            Op::Repeat { x: self.id, factor },
            self.needs_grad(),
        )
    }

    /// Non-overlapping mean over pairs along the last axis (`L -> floor(L/2)`).
    pub fn avg_pool2(self) -> Var<'g, F> {
        let xv = self.value();
        let len = *xv.shape().last().unwrap();
        let half = len / 2;
        let rows = xv.len() / len;
        let h = F::c(0.5);
        let d = xv.data();
        let mut out = Vec::with_capacity(rows * half);
        for r in 0..rows {
            for t in 0..half {
                out.push((d[r * len + 2 * t] + d[r * len + 2 * t + 1]) * h);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = half;
        self.g.push(
            Tensor::new(&shape, out),
            Op::AvgPool2(self.id),
            self.needs_grad(),
        )
    }

    pub fn sum(self) -> Var<'g, F> {
        let v = self.value().sum();
        self.g
            .push(Tensor::scalar(v), Op::Sum(self.id), self.needs_grad())
    }

    pub fn mean(self) -> Var<'g, F> {
        let xv = self.value();
        let v = xv.sum() / F::c(xv.len() as f64);
        self.g
            .push(Tensor::scalar(v), Op::Mean(self.id), self.needs_grad())
    }

    /// Forward value is `replacement` bit-for-bit; backward hands the incoming
    /// gradient to `self` unchanged.
    pub fn straight_through(self, replacement: Tensor<F>) -> Var<'g, F> {
        assert_eq!(
            self.shape(),
            replacement.shape(),
            "straight-through shape mismatch"
        );
        self.g
            .push(replacement, Op::StraightThrough(self.id), self.needs_grad())
    }

    /// Fold `[B, 1, L]` into `[B * period, 1, ceil(L / period)]`; row `b * period + j`
    /// holds samples `j, j + period, ...`, zero-padded at the tail.
    pub fn fold_periods(self, period: usize) -> Var<'g, F> {
        let xv = self.value();
        assert!(xv.rank() == 3 && xv.dim(1) == 1, "fold expects [B, 1, L]");
        let (batch, len) = (xv.dim(0), xv.dim(2));
        let rows = len.div_ceil(period);
        let d = xv.data();
        let mut out = vec![F::zero(); batch * period * rows];
        for b in 0..batch {
            for j in 0..period {
                for h in 0..rows {
                    let src = h * period + j;
                    if src < len {
                        out[(b * period + j) * rows + h] = d[b * len + src];
                    }
                }
            }
        }
        self.g.push(
            Tensor::new(&[batch * period, 1, rows], out),
            Op::Fold {
                x: self.id,
                batch,
                len,
                period,
                rows,
            },
            self.needs_grad(),
        )
    }

    /// Slice `[B, L]` into `frames` overlapping windows: frame `f` reads
    /// samples `f * hop + offset ..` (zero outside the signal). Output `[B * frames, win]`.
    pub fn frames(self, win: usize, hop: usize, offset: isize, frames: usize) -> Var<'g, F> {
        let xv = self.value();
        assert_eq!(xv.rank(), 2);
        let (batch, len) = (xv.dim(0), xv.dim(1));
        let d = xv.data();
        let mut out = vec![F::zero(); batch * frames * win];
        for b in 0..batch {
            for f in 0..frames {
                let row = &mut out[(b * frames + f) * win..(b * frames + f + 1) * win];
                for (i, v) in row.iter_mut().enumerate() {
                    let p = (f * hop + i) as isize + offset;
                    if p >= 0 && (p as usize) < len {
                        *v = d[b * len + p as usize];
                    }
                }
            }
        }
        self.g.push(
            Tensor::new(&[batch * frames, win], out),
            Op::Frame {
                x: self.id,
                batch,
                len,
                win,
                hop,
                offset,
                frames,
            },
            self.needs_grad(),
        )
    }

    /// `[B, T, D] -> [B, D]` at step `t`.
    pub fn select_time(self, t: usize) -> Var<'g, F> {
        let xv = self.value();
        let (batch, steps, dim) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut out = Vec::with_capacity(batch * dim);
        for b in 0..batch {
            let s = (b * steps + t) * dim;
            out.extend_from_slice(&xv.data()[s..s + dim]);
        }
        self.g.push(
            Tensor::new(&[batch, dim], out),
            Op::SelectTime {
                x: self.id,
                batch,
                steps,
                t,
                dim,
            },
            self.needs_grad(),
        )
    }

    /// Stack `T` tensors of shape `[B, D]` into `[B, T, D]`.
    pub fn stack_time(parts: &[Var<'g, F>]) -> Var<'g, F> {
        let g = parts[0].g;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (batch, dim) = (values[0].dim(0), values[0].dim(1));
        let steps = parts.len();
        let mut out = vec![F::zero(); batch * steps * dim];
        for (t, v) in values.iter().enumerate() {
            assert_eq!(v.shape(), [batch, dim]);
            for b in 0..batch {
                let dst = (b * steps + t) * dim;
                out[dst..dst + dim].copy_from_slice(&v.data()[b * dim..(b + 1) * dim]);
            }
        }
        let ng = parts.iter().any(|p| p.needs_grad());
        g.push(
            Tensor::new(&[batch, steps, dim], out),
            Op::Stack {
                parts: parts.iter().map(|p| p.id).collect(),
                batch,
                dim,
            },
            ng,
        )
    }
}
