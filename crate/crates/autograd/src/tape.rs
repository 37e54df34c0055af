//! Reverse-mode automatic differentiation on a growable tape.
//!
//! Every operation evaluates eagerly and records enough metadata to build its
//! vector-Jacobian products later. `backward` does not produce raw buffers: it
//! appends new *nodes* expressing the gradients, so a gradient can itself be
//! differentiated by calling `backward` again on a scalar derived from it.
//! That property is what makes gradient penalties on a discriminator cheap to
//! support without a separate higher-order machinery.
//!
//! Conventions:
//! - all data is `f64`; shapes are dynamic (`IxDyn`);
//! - binary arithmetic broadcasts like NumPy (trailing-dim alignment);
//! - reductions keep reduced axes as size 1;
//! - non-smooth choice points (leaky-relu mask, |x| sign, pooling argmax) are
//!   frozen at their forward values when differentiated a second time.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayD, Axis, IxDyn, Zip};

use crate::kernels::{self, ConvSpec};
use crate::nn::Param;

/// Shared immutable tensor payload. Cloning is O(1).
pub type Shared = ndarray::ArcArray<f64, IxDyn>;

/// Handle to a tape node.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct NodeId(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Abs(NodeId),
    LeakyRelu { x: NodeId, slope: f64 },
    PowScalar { x: NodeId, p: f64 },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Reshape { x: NodeId },
    BroadcastTo { x: NodeId },
    SumAxes { x: NodeId },
    Transpose2 { x: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    SliceAxis { x: NodeId, axis: usize, start: usize },
    PadAxis { x: NodeId, axis: usize, before: usize },
    MatMul { a: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, spec: ConvSpec },
    ConvBwdInput { g: NodeId, w: NodeId, spec: ConvSpec },
    ConvBwdWeight { x: NodeId, g: NodeId, spec: ConvSpec },
    SumPool { x: NodeId, k: (usize, usize) },
    Upsample { x: NodeId, k: (usize, usize) },
    Gather { x: NodeId, idx: Arc<Vec<usize>> },
    Scatter { g: NodeId, idx: Arc<Vec<usize>> },
}

struct Node {
    data: Shared,
    op: Op,
    needs_grad: bool,
}

/// Gradient handles produced by one `backward` call, indexed by the node ids
/// that existed when it ran.
pub struct Grads {
    g: Vec<Option<NodeId>>,
}

impl Grads {
    /// Gradient node of `id`, if any was produced.
    pub fn get(&self, id: NodeId) -> Option<NodeId> {
        self.g.get(id.0).copied().flatten()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<usize, NodeId>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            panic!("broadcast mismatch: {:?} vs {:?}", a, b)
        };
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes. Useful for memory diagnostics in tests.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, data: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { data: data.into_shared(), op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_shared(&mut self, data: Shared, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { data, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Non-differentiable data leaf.
    pub fn constant(&mut self, data: ArrayD<f64>) -> NodeId {
        self.push(data, Op::Leaf, false)
    }

    /// Scalar constant with shape `[1]`.
    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    /// Differentiable leaf that is not a parameter (e.g. an input the caller
    /// wants gradients for, as in gradient penalties).
    pub fn input(&mut self, data: ArrayD<f64>) -> NodeId {
        self.push(data, Op::Leaf, true)
    }

    /// Leaf for a parameter. Repeated calls with the same parameter return the
    /// same node, so gradients from every use site accumulate into one slot.
    pub fn param(&mut self, p: &Param) -> NodeId {
        if let Some(&id) = self.param_leaves.get(&p.key()) {
            return id;
        }
        let rg = p.requires_grad();
        let id = self.push_shared(p.value(), Op::Leaf, rg);
        self.param_leaves.insert(p.key(), id);
        id
    }

    /// Leaf node previously created for `p`, if `param` was called.
    pub fn leaf_of(&self, p: &Param) -> Option<NodeId> {
        self.param_leaves.get(&p.key()).copied()
    }

    /// New leaf sharing `x`'s data but cut off from the graph.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.clone();
        self.push_shared(data, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> ndarray::ArrayViewD<'_, f64> {
        self.nodes[id.0].data.view()
    }

    pub fn data(&self, id: NodeId) -> Shared {
        self.nodes[id.0].data.clone()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].data.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let d = &self.nodes[id.0].data;
        assert_eq!(d.len(), 1, "scalar() on node of {} elements", d.len());
        *d.iter().next().unwrap()
    }

    // ---- elementwise binary (broadcasting) ----

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: fn(f64, f64) -> f64) -> NodeId {
        let sh = broadcast_shape(self.shape(a), self.shape(b));
        let av = self.nodes[a.0].data.broadcast(IxDyn(&sh)).expect("broadcast a");
        let bv = self.nodes[b.0].data.broadcast(IxDyn(&sh)).expect("broadcast b");
        let mut out = ArrayD::<f64>::zeros(IxDyn(&sh));
        Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    // ---- elementwise unary ----

    fn unary(&mut self, x: NodeId, op: Op, f: fn(f64) -> f64) -> NodeId {
        let out = self.nodes[x.0].data.mapv(f);
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    /// ln(1 + e^x), computed stably for large |x|.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Softplus(x), |v| v.max(0.0) + (-v.abs()).exp().ln_1p())
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let out = self.nodes[x.0].data.mapv(|v| if v >= 0.0 { v } else { slope * v });
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn pow_scalar(&mut self, x: NodeId, p: f64) -> NodeId {
        let out = self.nodes[x.0].data.mapv(|v| v.powf(p));
        let ng = self.ng(x);
        self.push(out, Op::PowScalar { x, p }, ng)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.pow_scalar(x, 2.0)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.nodes[x.0].data.mapv(|v| c * v);
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, c }, ng)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.nodes[x.0].data.mapv(|v| v + c);
        let ng = self.ng(x);
        self.push(out, Op::AddScalar { x }, ng)
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let std = self.nodes[x.0].data.as_standard_layout().into_owned();
        let from = self.shape(x).to_vec();
        let out = std
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {:?} -> {:?}", from, shape));
        let ng = self.ng(x);
        self.push(out, Op::Reshape { x }, ng)
    }

    pub fn broadcast_to(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let out = self.nodes[x.0]
            .data
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("broadcast {:?} -> {:?}", self.shape(x), shape))
            .to_owned();
        let ng = self.ng(x);
        self.push(out, Op::BroadcastTo { x }, ng)
    }

    /// Sum over `axes`, keeping them as size 1.
    pub fn sum_axes(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut out = self.nodes[x.0].data.to_owned();
        for &ax in sorted.iter().rev() {
            out = out.sum_axis(Axis(ax));
        }
        for &ax in sorted.iter() {
            out = out.insert_axis(Axis(ax));
        }
        let ng = self.ng(x);
        self.push(out, Op::SumAxes { x }, ng)
    }

    pub fn mean_axes(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let n: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let s = self.sum_axes(x, axes);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of all elements as a `[1]` node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum_axes(x, &axes);
        self.reshape(s, &[1])
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].data.len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn transpose2(&mut self, x: NodeId) -> NodeId {
        assert_eq!(self.shape(x).len(), 2, "transpose2 needs rank 2");
        let out = self.nodes[x.0].data.t().as_standard_layout().to_owned();
        let ng = self.ng(x);
        self.push(out, Op::Transpose2 { x }, ng)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].data.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    pub fn slice_axis(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let out = self.nodes[x.0]
            .data
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let ng = self.ng(x);
        self.push(out, Op::SliceAxis { x, axis, start }, ng)
    }

    pub fn pad_axis(&mut self, x: NodeId, axis: usize, before: usize, after: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let mut sh = xs.clone();
        sh[axis] += before + after;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&sh));
        out.slice_axis_mut(Axis(axis), ndarray::Slice::from(before..before + xs[axis]))
            .assign(&self.nodes[x.0].data);
        let ng = self.ng(x);
        self.push(out, Op::PadAxis { x, axis, before }, ng)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0]
            .data
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs rank 2");
        let bv = self.nodes[b.0]
            .data
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs rank 2");
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim");
        let mut out = ndarray::Array2::<f64>::zeros((av.nrows(), bv.ncols()));
        ndarray::linalg::general_mat_mul(1.0, &av, &bv, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out.into_dyn(), Op::MatMul { a, b }, ng)
    }

    // ---- convolution ----

    fn view4(&self, x: NodeId) -> ndarray::ArrayView4<'_, f64> {
        self.nodes[x.0]
            .data
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("rank-4 tensor required")
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, spec: ConvSpec) -> NodeId {
        let out = kernels::conv2d(&self.view4(x), &self.view4(w), &spec);
        let ng = self.ng(x) || self.ng(w);
        self.push(out.into_dyn(), Op::Conv2d { x, w, spec }, ng)
    }

    fn conv2d_bwd_input(&mut self, g: NodeId, w: NodeId, spec: ConvSpec, in_hw: (usize, usize)) -> NodeId {
        let out = kernels::conv2d_bwd_input(&self.view4(g), &self.view4(w), &spec, in_hw);
        let ng = self.ng(g) || self.ng(w);
        self.push(out.into_dyn(), Op::ConvBwdInput { g, w, spec }, ng)
    }

    fn conv2d_bwd_weight(&mut self, x: NodeId, g: NodeId, spec: ConvSpec, k_hw: (usize, usize)) -> NodeId {
        let out = kernels::conv2d_bwd_weight(&self.view4(x), &self.view4(g), &spec, k_hw);
        let ng = self.ng(x) || self.ng(g);
        self.push(out.into_dyn(), Op::ConvBwdWeight { x, g, spec }, ng)
    }

    // ---- pooling / resampling ----

    pub fn sum_pool(&mut self, x: NodeId, k: (usize, usize)) -> NodeId {
        let out = kernels::sum_pool(&self.view4(x), k);
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::SumPool { x, k }, ng)
    }

    pub fn avg_pool(&mut self, x: NodeId, k: (usize, usize)) -> NodeId {
        let s = self.sum_pool(x, k);
        self.scale(s, 1.0 / (k.0 * k.1) as f64)
    }

    pub fn upsample_nearest(&mut self, x: NodeId, k: (usize, usize)) -> NodeId {
        let out = kernels::upsample_nearest(&self.view4(x), k);
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::Upsample { x, k }, ng)
    }

    pub fn max_pool(&mut self, x: NodeId, k: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> NodeId {
        let (out, idx) = kernels::max_pool_idx(&self.view4(x), k, stride, pad);
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::Gather { x, idx: Arc::new(idx) }, ng)
    }

    pub fn adaptive_max_pool(&mut self, x: NodeId, out_hw: (usize, usize)) -> NodeId {
        let (out, idx) = kernels::adaptive_max_pool_idx(&self.view4(x), out_hw);
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::Gather { x, idx: Arc::new(idx) }, ng)
    }

    fn gather(&mut self, x: NodeId, idx: Arc<Vec<usize>>, shape: &[usize]) -> NodeId {
        let src = self.nodes[x.0].data.as_standard_layout().to_owned();
        let flat = src.as_slice().unwrap();
        let vals: Vec<f64> = idx.iter().map(|&i| flat[i]).collect();
        let out = ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap();
        let ng = self.ng(x);
        self.push(out, Op::Gather { x, idx }, ng)
    }

    fn scatter(&mut self, g: NodeId, idx: Arc<Vec<usize>>, in_shape: Vec<usize>) -> NodeId {
        let src = self.nodes[g.0].data.as_standard_layout().to_owned();
        let flat = src.as_slice().unwrap();
        let mut out = vec![0.0f64; in_shape.iter().product()];
        for (o, &i) in idx.iter().enumerate() {
            out[i] += flat[o];
        }
        let data = ArrayD::from_shape_vec(IxDyn(&in_shape), out).unwrap();
        let ng = self.ng(g);
        self.push(data, Op::Scatter { g, idx }, ng)
    }

    // ---- composites ----

    /// Row-stable log-softmax along `axis`. The max shift is treated as a
    /// constant, which leaves the exact gradient intact.
    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let maxes = {
            let d = &self.nodes[x.0].data;
            let mut m = d.map_axis(Axis(axis), |row| row.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
            m = m.insert_axis(Axis(axis));
            m
        };
        let m = self.constant(maxes);
        let z = self.sub(x, m);
        let e = self.exp(z);
        let s = self.sum_axes(e, &[axis]);
        let l = self.ln(s);
        self.sub(z, l)
    }

    // ---- backward ----

    fn parents(op: &Op, out: &mut Vec<NodeId>) {
        out.clear();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                out.push(*a);
                out.push(*b);
            }
            Op::Neg(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Abs(x)
            | Op::LeakyRelu { x, .. }
            | Op::PowScalar { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Reshape { x }
            | Op::BroadcastTo { x }
            | Op::SumAxes { x, .. }
            | Op::Transpose2 { x }
            | Op::SliceAxis { x, .. }
            | Op::PadAxis { x, .. }
            | Op::SumPool { x, .. }
            | Op::Upsample { x, .. }
            | Op::Gather { x, .. } => out.push(*x),
            Op::Scatter { g, .. } => out.push(*g),
            Op::Concat { parts, .. } => out.extend_from_slice(parts),
            Op::MatMul { a, b } => {
                out.push(*a);
                out.push(*b);
            }
            Op::Conv2d { x, w, .. } => {
                out.push(*x);
                out.push(*w);
            }
            Op::ConvBwdInput { g, w, .. } => {
                out.push(*g);
                out.push(*w);
            }
            Op::ConvBwdWeight { x, g, .. } => {
                out.push(*x);
                out.push(*g);
            }
        }
    }

    /// Sum `g` down to `target` (reversing broadcast), assuming shapes are
    /// broadcast-compatible with `g`'s.
    fn reduce_like(&mut self, g: NodeId, target: &[usize]) -> NodeId {
        let gs = self.shape(g).to_vec();
        if gs == target {
            return g;
        }
        let off = gs.len() - target.len();
        let axes: Vec<usize> = (0..gs.len())
            .filter(|&i| i < off || (target[i - off] == 1 && gs[i] > 1))
            .collect();
        let summed = if axes.is_empty() { g } else { self.sum_axes(g, &axes) };
        if self.shape(summed) == target {
            summed
        } else {
            self.reshape(summed, target)
        }
    }

    /// Contributions of node `i`'s VJP given upstream gradient `g`, as
    /// (parent, contribution) pairs. Only parents with `needs_grad` and a
    /// relevance mark receive contributions.
    fn vjp(&mut self, i: NodeId, g: NodeId, want: &dyn Fn(NodeId) -> bool, out: &mut Vec<(NodeId, NodeId)>) {
        let op = self.nodes[i.0].op.clone();
        macro_rules! emit {
            ($p:expr, $builder:expr) => {
                if self.ng($p) && want($p) {
                    let c = $builder(self);
                    out.push(($p, c));
                }
            };
        }
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                emit!(a, |t: &mut Tape| t.reduce_like(g, &sa));
                emit!(b, |t: &mut Tape| t.reduce_like(g, &sb));
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                emit!(a, |t: &mut Tape| t.reduce_like(g, &sa));
                emit!(b, |t: &mut Tape| {
                    let n = t.neg(g);
                    t.reduce_like(n, &sb)
                });
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                emit!(a, |t: &mut Tape| {
                    let m = t.mul(g, b);
                    t.reduce_like(m, &sa)
                });
                emit!(b, |t: &mut Tape| {
                    let m = t.mul(g, a);
                    t.reduce_like(m, &sb)
                });
            }
            Op::Div(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                emit!(a, |t: &mut Tape| {
                    let d = t.div(g, b);
                    t.reduce_like(d, &sa)
                });
                emit!(b, |t: &mut Tape| {
                    // d/db (a/b) = -y/b with y the forward output.
                    let gy = t.mul(g, i);
                    let q = t.div(gy, b);
                    let n = t.neg(q);
                    t.reduce_like(n, &sb)
                });
            }
            Op::Neg(x) => emit!(x, |t: &mut Tape| t.neg(g)),
            Op::Exp(x) => emit!(x, |t: &mut Tape| t.mul(g, i)),
            Op::Ln(x) => emit!(x, |t: &mut Tape| t.div(g, x)),
            Op::Tanh(x) => emit!(x, |t: &mut Tape| {
                let y2 = t.square(i);
                let ny2 = t.neg(y2);
                let one_m = t.add_scalar(ny2, 1.0);
                t.mul(g, one_m)
            }),
            Op::Sigmoid(x) => emit!(x, |t: &mut Tape| {
                let ny = t.neg(i);
                let om = t.add_scalar(ny, 1.0);
                let yy = t.mul(i, om);
                t.mul(g, yy)
            }),
            Op::Softplus(x) => emit!(x, |t: &mut Tape| {
                let s = t.sigmoid(x);
                t.mul(g, s)
            }),
            Op::Abs(x) => emit!(x, |t: &mut Tape| {
                let sign = t.nodes[x.0].data.mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let s = t.constant(sign);
                t.mul(g, s)
            }),
            Op::LeakyRelu { x, slope } => emit!(x, |t: &mut Tape| {
                let mask = t.nodes[x.0].data.mapv(|v| if v >= 0.0 { 1.0 } else { slope });
                let m = t.constant(mask);
                t.mul(g, m)
            }),
            Op::PowScalar { x, p } => emit!(x, |t: &mut Tape| {
                let xp = t.pow_scalar(x, p - 1.0);
                let sp = t.scale(xp, p);
                t.mul(g, sp)
            }),
            Op::Scale { x, c } => emit!(x, |t: &mut Tape| t.scale(g, c)),
            Op::AddScalar { x } => emit!(x, |t: &mut Tape| t.reshape_like(g, x)),
            Op::Reshape { x } => emit!(x, |t: &mut Tape| {
                let sh = t.shape(x).to_vec();
                t.reshape(g, &sh)
            }),
            Op::BroadcastTo { x } => emit!(x, |t: &mut Tape| {
                let sh = t.shape(x).to_vec();
                t.reduce_like(g, &sh)
            }),
            Op::SumAxes { x, .. } => emit!(x, |t: &mut Tape| {
                let sh = t.shape(x).to_vec();
                t.broadcast_to(g, &sh)
            }),
            Op::Transpose2 { x } => emit!(x, |t: &mut Tape| t.transpose2(g)),
            Op::Concat { parts, axis } => {
                let mut offset = 0usize;
                for p in parts {
                    let len = self.shape(p)[axis];
                    emit!(p, |t: &mut Tape| t.slice_axis(g, axis, offset, len));
                    offset += len;
                }
            }
            Op::SliceAxis { x, axis, start } => emit!(x, |t: &mut Tape| {
                let total = t.shape(x)[axis];
                let len = t.shape(i)[axis];
                t.pad_axis(g, axis, start, total - start - len)
            }),
            Op::PadAxis { x, axis, before } => emit!(x, |t: &mut Tape| {
                let len = t.shape(x)[axis];
                t.slice_axis(g, axis, before, len)
            }),
            Op::MatMul { a, b } => {
                emit!(a, |t: &mut Tape| {
                    let bt = t.transpose2(b);
                    t.matmul(g, bt)
                });
                emit!(b, |t: &mut Tape| {
                    let at = t.transpose2(a);
                    t.matmul(at, g)
                });
            }
            Op::Conv2d { x, w, spec } => {
                let in_hw = {
                    let s = self.shape(x);
                    (s[2], s[3])
                };
                let k_hw = {
                    let s = self.shape(w);
                    (s[2], s[3])
                };
                emit!(x, |t: &mut Tape| t.conv2d_bwd_input(g, w, spec, in_hw));
                emit!(w, |t: &mut Tape| t.conv2d_bwd_weight(x, g, spec, k_hw));
            }
            Op::ConvBwdInput { g: fg, w, spec, .. } => {
                let k_hw = {
                    let s = self.shape(w);
                    (s[2], s[3])
                };
                emit!(fg, |t: &mut Tape| t.conv2d(g, w, spec));
                emit!(w, |t: &mut Tape| t.conv2d_bwd_weight(g, fg, spec, k_hw));
            }
            Op::ConvBwdWeight { x, g: fg, spec, .. } => {
                let in_hw = {
                    let s = self.shape(x);
                    (s[2], s[3])
                };
                emit!(x, |t: &mut Tape| t.conv2d_bwd_input(fg, g, spec, in_hw));
                emit!(fg, |t: &mut Tape| t.conv2d(x, g, spec));
            }
            Op::SumPool { x, k } => emit!(x, |t: &mut Tape| t.upsample_nearest(g, k)),
            Op::Upsample { x, k } => emit!(x, |t: &mut Tape| t.sum_pool(g, k)),
            Op::Gather { x, idx } => emit!(x, |t: &mut Tape| {
                let sh = t.shape(x).to_vec();
                t.scatter(g, idx.clone(), sh)
            }),
            Op::Scatter { g: fg, idx, .. } => emit!(fg, |t: &mut Tape| {
                let sh = t.shape(fg).to_vec();
                t.gather(g, idx.clone(), &sh)
            }),
        }
    }

    fn reshape_like(&mut self, g: NodeId, x: NodeId) -> NodeId {
        let sh = self.shape(x).to_vec();
        if self.shape(g) == sh.as_slice() {
            g
        } else {
            self.reshape(g, &sh)
        }
    }

    /// Reverse pass from scalar `root`. Gradients are materialized only along
    /// paths that reach `targets`; every gradient is itself a tape node, so
    /// the result can be differentiated again.
    pub fn backward(&mut self, root: NodeId, targets: &[NodeId]) -> Grads {
        let d = &self.nodes[root.0].data;
        assert_eq!(d.len(), 1, "backward root must be scalar, got {:?}", d.shape());
        let n = root.0 + 1;
        let mut relevant = vec![false; n];
        for t in targets {
            if t.0 < n {
                relevant[t.0] = true;
            }
        }
        let mut parents = Vec::with_capacity(4);
        for i in 0..n {
            if relevant[i] {
                continue;
            }
            Self::parents(&self.nodes[i].op, &mut parents);
            if parents.iter().any(|p| relevant[p.0]) {
                relevant[i] = true;
            }
        }
        let mut grad: Vec<Option<NodeId>> = vec![None; n];
        let seed_shape = self.shape(root).to_vec();
        let seed = self.constant(ArrayD::from_elem(IxDyn(&seed_shape), 1.0));
        grad[root.0] = Some(seed);
        let mut local: Vec<(NodeId, NodeId)> = Vec::with_capacity(4);
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad || !relevant[i] {
                continue;
            }
            let g = match grad[i] {
                Some(g) => g,
                None => continue,
            };
            local.clear();
            self.vjp(NodeId(i), g, &|p: NodeId| relevant[p.0], &mut local);
            for &(p, c) in local.iter() {
                grad[p.0] = Some(match grad[p.0] {
                    None => c,
                    Some(old) => self.add(old, c),
                });
            }
        }
        Grads { g: grad }
    }
}
