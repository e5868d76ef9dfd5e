//! Dynamic tape and differentiable operations.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Node ids increase in creation order, so walking ids backwards from the
//! loss is a valid reverse topological order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Sparse gather-multiply-scatter pattern shared by all voxel convolutions.
///
/// For each kernel offset `k`, every pair `(i, o)` adds `input[i] * W_k` to
/// `output[o]`, where `W_k` is rows `k*C_in .. (k+1)*C_in` of the weight.
#[derive(Debug, Clone, Default)]
pub struct KernelMap {
    pub n_in: usize,
    pub n_out: usize,
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl KernelMap {
    pub fn n_offsets(&self) -> usize {
        self.pairs.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    Abs(usize),
    Softmax(usize, usize),
    Sum(usize),
    SumAxis(usize, usize),
    Mean(usize),
    MaxAxis(usize, usize, Rc<Vec<usize>>),
    SegmentMax(usize, Rc<Vec<usize>>),
    Concat(Vec<usize>, usize),
    Gather(usize, Rc<Vec<usize>>),
    ScatterAdd(usize, Rc<Vec<usize>>),
    Reshape(usize),
    KernelConv(usize, usize, Rc<KernelMap>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    store: Option<Vec<Tensor>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// Result shape of a broadcast binary op on rank-2 operands, or identical shapes.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        return Ok(a.shape().to_vec());
    }
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    let mut out = vec![0; 2];
    for (d, slot) in out.iter_mut().enumerate() {
        let (x, y) = (a.shape()[d], b.shape()[d]);
        *slot = if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            return Err(shape_err(op, a.shape(), b.shape()));
        };
    }
    Ok(out)
}

#[inline]
fn bidx(shape: &[usize], r: usize, c: usize) -> usize {
    let rr = if shape[0] == 1 { 0 } else { r };
    let cc = if shape[1] == 1 { 0 } else { c };
    rr * shape[1] + cc
}

fn broadcast_apply(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape, data).unwrap();
    }
    let (rows, cols) = (out_shape[0], out_shape[1]);
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(f(a.data()[bidx(a.shape(), r, c)], b.data()[bidx(b.shape(), r, c)]));
        }
    }
    Tensor::new(out_shape, data).unwrap()
}

/// Sums a gradient of the broadcast output shape back into `target` shape.
fn unbroadcast(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let mut out = Tensor::zeros(target);
    let (rows, cols) = (grad.shape()[0], grad.shape()[1]);
    for r in 0..rows {
        for c in 0..cols {
            out.data_mut()[bidx(target, r, c)] += grad.data()[r * cols + c];
        }
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Grads {
    leaves: HashMap<usize, Tensor>,
    params: Vec<(ParamId, Tensor)>,
}

impl Grads {
    /// Gradient w.r.t. a leaf created with [`Graph::input`] or a parameter.
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        self.leaves.get(&v.id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.grad_mut(*id).add_assign(g);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph whose parameter leaves are snapshotted from `store`.
    pub fn with_params(store: &ParamStore) -> Self {
        Graph {
            store: Some(store.values().to_vec()),
            ..Graph::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn val(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Leaf whose gradient is reported by [`Grads::wrt`].
    pub fn input(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that does not take part in differentiation.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let store = self
            .store
            .as_ref()
            .expect("Graph::param requires a graph built with Graph::with_params");
        let v = self.push(store[id.index()].clone(), Op::Param(id), true);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    pub fn concat(&self, xs: &[Var<'_>], axis: usize) -> Result<Var<'_>> {
        if xs.is_empty() {
            return Err(AutodiffError::Contract("concat of zero tensors".into()));
        }
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|v| self.val(v.id)).collect();
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        for v in &vals {
            if v.shape().len() != 2 {
                return Err(shape_err("concat", vals[0].shape(), v.shape()));
            }
        }
        let out = match axis {
            0 => {
                let cols = vals[0].cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for v in &vals {
                    if v.cols() != cols {
                        return Err(shape_err("concat", vals[0].shape(), v.shape()));
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor::matrix(rows, cols, data)
            }
            1 => {
                let rows = vals[0].rows();
                for v in &vals {
                    if v.rows() != rows {
                        return Err(shape_err("concat", vals[0].shape(), v.shape()));
                    }
                }
                let cols: usize = vals.iter().map(|v| v.cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for v in &vals {
                        data.extend_from_slice(v.row(r));
                    }
                }
                Tensor::matrix(rows, cols, data)
            }
            _ => return Err(AutodiffError::Contract(format!("concat axis {axis}"))),
        };
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::Concat(ids, axis), rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.numel() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Grads::default();

        fn acc(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            let v = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(id, g);
                }
                Op::Param(p) => {
                    out.params.push((*p, g));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (v(*a), v(*b));
                    let (m, k) = as_matrix(av);
                    let n = bv.cols();
                    if nodes[*a].requires_grad {
                        let mut ga = Tensor::zeros(av.shape());
                        gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut(), false);
                        acc(&mut grads, &nodes, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = Tensor::zeros(bv.shape());
                        gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), false);
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, unbroadcast(&g, v(*a).shape()));
                    acc(&mut grads, &nodes, *b, unbroadcast(&g, v(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, unbroadcast(&g, v(*a).shape()));
                    acc(&mut grads, &nodes, *b, unbroadcast(&g.map(|x| -x), v(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (v(*a), v(*b));
                    if nodes[*a].requires_grad {
                        let full = broadcast_apply(&g, bv, g.shape(), |gg, bb| gg * bb);
                        acc(&mut grads, &nodes, *a, unbroadcast(&full, av.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let full = broadcast_apply(&g, av, g.shape(), |gg, aa| gg * aa);
                        acc(&mut grads, &nodes, *b, unbroadcast(&full, bv.shape()));
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, &nodes, *a, g.map(|x| x * s)),
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let gi = g.reshaped(v(*a).shape())?;
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::Relu(a) => {
                    let gi = zip(&g, v(*a), |gg, x| if x > 0.0 { gg } else { 0.0 });
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::Tanh(a) => {
                    let gi = zip(&g, y, |gg, t| gg * (1.0 - t * t));
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::Sigmoid(a) => {
                    let gi = zip(&g, y, |gg, s| gg * s * (1.0 - s));
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::Softplus(a) => {
                    let gi = zip(&g, v(*a), |gg, x| gg * sigmoid(x));
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::Exp(a) => {
                    let gi = zip(&g, y, |gg, e| gg * e);
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::Log(a) => {
                    let gi = zip(&g, v(*a), |gg, x| gg / x);
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::Square(a) => {
                    let gi = zip(&g, v(*a), |gg, x| 2.0 * gg * x);
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::Sqrt(a) => {
                    let gi = zip(&g, y, |gg, s| gg / (2.0 * s));
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::Abs(a) => {
                    let gi = zip(&g, v(*a), |gg, x| gg * x.signum() * (x != 0.0) as u8 as f64);
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::Softmax(a, axis) => {
                    let (rows, cols) = as_matrix(y);
                    let mut gi = Tensor::zeros(y.shape());
                    let (outer, inner, stride) = if *axis == 1 { (rows, cols, 1) } else { (cols, rows, cols) };
                    for o in 0..outer {
                        let base = if *axis == 1 { o * cols } else { o };
                        let mut dot = 0.0;
                        for i in 0..inner {
                            let idx = base + i * stride;
                            dot += g.data()[idx] * y.data()[idx];
                        }
                        for i in 0..inner {
                            let idx = base + i * stride;
                            gi.data_mut()[idx] = y.data()[idx] * (g.data()[idx] - dot);
                        }
                    }
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::Sum(a) => {
                    let gi = Tensor::full(v(*a).shape(), g.item());
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::Mean(a) => {
                    let n = v(*a).numel() as f64;
                    let gi = Tensor::full(v(*a).shape(), g.item() / n);
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::SumAxis(a, axis) => {
                    let av = v(*a);
                    let (rows, cols) = as_matrix(av);
                    let mut gi = Tensor::zeros(av.shape());
                    for r in 0..rows {
                        for c in 0..cols {
                            gi.data_mut()[r * cols + c] = if *axis == 0 { g.data()[c] } else { g.data()[r] };
                        }
                    }
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::MaxAxis(a, axis, arg) => {
                    let av = v(*a);
                    let cols = av.cols();
                    let mut gi = Tensor::zeros(av.shape());
                    for (o, &k) in arg.iter().enumerate() {
                        let idx = if *axis == 0 { k * cols + o } else { o * cols + k };
                        gi.data_mut()[idx] += g.data()[o];
                    }
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::SegmentMax(a, arg) => {
                    let av = v(*a);
                    let cols = av.cols();
                    let mut gi = Tensor::zeros(av.shape());
                    for (o, &row) in arg.iter().enumerate() {
                        gi.data_mut()[row * cols + o % cols] += g.data()[o];
                    }
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::Concat(ids, axis) => {
                    let (rows, cols) = as_matrix(&g);
                    let mut offset = 0;
                    for &i in ids {
                        let vi = v(i);
                        let gi = if *axis == 0 {
                            let n = vi.numel();
                            let t = Tensor::new(vi.shape(), g.data()[offset * cols..offset * cols + n].to_vec())?;
                            offset += vi.rows();
                            t
                        } else {
                            let w = vi.cols();
                            let mut data = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                data.extend_from_slice(&g.data()[r * cols + offset..r * cols + offset + w]);
                            }
                            offset += w;
                            Tensor::new(vi.shape(), data)?
                        };
                        acc(&mut grads, &nodes, i, gi);
                    }
                }
                Op::Gather(a, idx) => {
                    let av = v(*a);
                    let cols = av.cols();
                    let mut gi = Tensor::zeros(av.shape());
                    for (o, &r) in idx.iter().enumerate() {
                        let src = &g.data()[o * cols..(o + 1) * cols];
                        let dst = &mut gi.data_mut()[r * cols..(r + 1) * cols];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                    acc(&mut grads, &nodes, *a, gi)
                }
                Op::ScatterAdd(a, idx) => {
                    let av = v(*a);
                    let cols = av.cols();
                    let mut data = Vec::with_capacity(av.numel());
                    for &r in idx.iter() {
                        data.extend_from_slice(&g.data()[r * cols..(r + 1) * cols]);
                    }
                    acc(&mut grads, &nodes, *a, Tensor::new(av.shape(), data)?)
                }
                Op::KernelConv(x, w, map) => {
                    let (xv, wv) = (v(*x), v(*w));
                    let cin = xv.cols();
                    let cout = wv.cols();
                    let need_x = nodes[*x].requires_grad;
                    let need_w = nodes[*w].requires_grad;
                    let mut gx = Tensor::zeros(xv.shape());
                    let mut gw = Tensor::zeros(wv.shape());
                    for (k, pairs) in map.pairs.iter().enumerate() {
                        if pairs.is_empty() {
                            continue;
                        }
                        let p = pairs.len();
                        let wk = &wv.data()[k * cin * cout..(k + 1) * cin * cout];
                        let mut gk = Vec::with_capacity(p * cout);
                        for &(_, o) in pairs {
                            gk.extend_from_slice(g.row(o as usize));
                        }
                        if need_x {
                            let mut dx = vec![0.0; p * cin];
                            gemm(p, cout, cin, &gk, false, wk, true, &mut dx, false);
                            for (j, &(i, _)) in pairs.iter().enumerate() {
                                let dst = &mut gx.data_mut()[i as usize * cin..(i as usize + 1) * cin];
                                dst.iter_mut().zip(&dx[j * cin..(j + 1) * cin]).for_each(|(d, s)| *d += s);
                            }
                        }
                        if need_w {
                            let mut xk = Vec::with_capacity(p * cin);
                            for &(i, _) in pairs {
                                xk.extend_from_slice(xv.row(i as usize));
                            }
                            let dw = &mut gw.data_mut()[k * cin * cout..(k + 1) * cin * cout];
                            gemm(cin, p, cout, &xk, true, &gk, false, dw, true);
                        }
                    }
                    if need_x {
                        acc(&mut grads, &nodes, *x, gx);
                    }
                    if need_w {
                        acc(&mut grads, &nodes, *w, gw);
                    }
                }
            }
        }
        out.params.sort_by_key(|(p, _)| p.index());
        Ok(out)
    }
}

fn zip(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape(), data).unwrap()
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let out = self.value().map(f);
        let rg = self.graph.rg(&[self.id]);
        self.graph.push(out, op, rg)
    }

    fn binary(&self, other: &Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, &a, &b)?;
        let out = broadcast_apply(&a, &b, &shape, f);
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self.graph.push(out, op, rg))
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), false);
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self.graph.push(out, Op::MatMul(self.id, other.id), rg))
    }

    /// Elementwise sum with rank-2 broadcasting of unit dimensions.
    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Var<'g> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Var<'g> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn abs(&self) -> Var<'g> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    /// Softmax of a rank-2 tensor along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        if x.shape().len() != 2 || axis > 1 {
            return Err(shape_err("softmax", x.shape(), &[axis]));
        }
        let (rows, cols) = as_matrix(&x);
        let mut out = Tensor::zeros(x.shape());
        let (outer, inner, stride) = if axis == 1 { (rows, cols, 1) } else { (cols, rows, cols) };
        for o in 0..outer {
            let base = if axis == 1 { o * cols } else { o };
            let mx = (0..inner).map(|i| x.data()[base + i * stride]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..inner {
                let e = (x.data()[base + i * stride] - mx).exp();
                out.data_mut()[base + i * stride] = e;
                z += e;
            }
            for i in 0..inner {
                out.data_mut()[base + i * stride] /= z;
            }
        }
        let rg = self.graph.rg(&[self.id]);
        Ok(self.graph.push(out, Op::Softmax(self.id, axis), rg))
    }

    /// Sum of all elements as a `1 x 1` tensor.
    pub fn sum(&self) -> Var<'g> {
        let s: f64 = self.value().data().iter().sum();
        let rg = self.graph.rg(&[self.id]);
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'g> {
        let x = self.value();
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        let rg = self.graph.rg(&[self.id]);
        self.graph.push(Tensor::scalar(s), Op::Mean(self.id), rg)
    }

    /// Sum of a rank-2 tensor over `axis`; the reduced dimension is kept as 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        if x.shape().len() != 2 || axis > 1 {
            return Err(shape_err("sum_axis", x.shape(), &[axis]));
        }
        let (rows, cols) = as_matrix(&x);
        let out = if axis == 0 {
            let mut t = Tensor::zeros(&[1, cols]);
            for r in 0..rows {
                for c in 0..cols {
                    t.data_mut()[c] += x.data()[r * cols + c];
                }
            }
            t
        } else {
            Tensor::matrix(rows, 1, (0..rows).map(|r| x.row(r).iter().sum()).collect())
        };
        let rg = self.graph.rg(&[self.id]);
        Ok(self.graph.push(out, Op::SumAxis(self.id, axis), rg))
    }

    /// Maximum over `axis` of a rank-2 tensor, with the arg-max indices.
    /// Ties resolve to the lowest index.
    pub fn max_axis(&self, axis: usize) -> Result<(Var<'g>, Vec<usize>)> {
        let x = self.value();
        if x.shape().len() != 2 || axis > 1 || x.numel() == 0 {
            return Err(shape_err("max_axis", x.shape(), &[axis]));
        }
        let (rows, cols) = as_matrix(&x);
        let (outer, inner) = if axis == 0 { (cols, rows) } else { (rows, cols) };
        let at = |o: usize, i: usize| if axis == 0 { x.data()[i * cols + o] } else { x.data()[o * cols + i] };
        let mut vals = Vec::with_capacity(outer);
        let mut arg = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best = 0;
            for i in 1..inner {
                if at(o, i) > at(o, best) {
                    best = i;
                }
            }
            vals.push(at(o, best));
            arg.push(best);
        }
        let shape = if axis == 0 { [1, cols] } else { [rows, 1] };
        let out = Tensor::new(&shape, vals)?;
        let rg = self.graph.rg(&[self.id]);
        let v = self.graph.push(out, Op::MaxAxis(self.id, axis, Rc::new(arg.clone())), rg);
        Ok((v, arg))
    }

    /// Column-wise maximum over row groups: output row `s` is the max over
    /// input rows `r` with `segments[r] == s`. Every segment must be non-empty.
    pub fn segment_max(&self, segments: &[usize], n_segments: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (rows, cols) = as_matrix(&x);
        if segments.len() != rows {
            return Err(shape_err("segment_max", x.shape(), &[segments.len()]));
        }
        let mut out = vec![f64::NEG_INFINITY; n_segments * cols];
        let mut arg = vec![usize::MAX; n_segments * cols];
        for (r, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(AutodiffError::Contract(format!("segment {s} >= {n_segments}")));
            }
            for c in 0..cols {
                let v = x.data()[r * cols + c];
                if arg[s * cols + c] == usize::MAX || v > out[s * cols + c] {
                    out[s * cols + c] = v;
                    arg[s * cols + c] = r;
                }
            }
        }
        if cols > 0 && arg.contains(&usize::MAX) {
            return Err(AutodiffError::Contract("segment_max with an empty segment".into()));
        }
        let rg = self.graph.rg(&[self.id]);
        Ok(self.graph.push(Tensor::matrix(n_segments, cols, out), Op::SegmentMax(self.id, Rc::new(arg)), rg))
    }

    /// Rows `idx[0], idx[1], ...` of a rank-2 tensor.
    pub fn gather(&self, idx: Rc<Vec<usize>>) -> Result<Var<'g>> {
        let x = self.value();
        let (rows, cols) = as_matrix(&x);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx.iter() {
            if r >= rows {
                return Err(shape_err("gather", x.shape(), &[r]));
            }
            data.extend_from_slice(x.row(r));
        }
        let rg = self.graph.rg(&[self.id]);
        Ok(self.graph.push(Tensor::matrix(idx.len(), cols, data), Op::Gather(self.id, idx), rg))
    }

    /// Adds input row `i` into output row `idx[i]` of an `n_rows`-row result.
    pub fn scatter_add(&self, idx: Rc<Vec<usize>>, n_rows: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (rows, cols) = as_matrix(&x);
        if idx.len() != rows {
            return Err(shape_err("scatter_add", x.shape(), &[idx.len()]));
        }
        let mut out = Tensor::zeros(&[n_rows, cols]);
        for (i, &r) in idx.iter().enumerate() {
            if r >= n_rows {
                return Err(shape_err("scatter_add", x.shape(), &[r, n_rows]));
            }
            let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
            dst.iter_mut().zip(x.row(i)).for_each(|(d, s)| *d += s);
        }
        let rg = self.graph.rg(&[self.id]);
        Ok(self.graph.push(out, Op::ScatterAdd(self.id, idx), rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let out = (*self.value()).clone().reshaped(shape)?;
        let rg = self.graph.rg(&[self.id]);
        Ok(self.graph.push(out, Op::Reshape(self.id), rg))
    }

    /// Sparse convolution `out[o] += self[i] * W_k` over the pairs of `map`.
    pub fn kernel_conv(&self, weight: &Var<'g>, map: Rc<KernelMap>) -> Result<Var<'g>> {
        let (x, w) = (self.value(), weight.value());
        let cin = x.cols();
        if x.rows() != map.n_in || w.shape().len() != 2 || w.rows() != map.n_offsets() * cin {
            return Err(shape_err("kernel_conv", x.shape(), w.shape()));
        }
        let cout = w.cols();
        let mut out = Tensor::zeros(&[map.n_out, cout]);
        let mut xk = Vec::new();
        let mut yk = Vec::new();
        for (k, pairs) in map.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let p = pairs.len();
            xk.clear();
            for &(i, _) in pairs {
                xk.extend_from_slice(x.row(i as usize));
            }
            yk.resize(p * cout, 0.0);
            let wk = &w.data()[k * cin * cout..(k + 1) * cin * cout];
            gemm(p, cin, cout, &xk, false, wk, false, &mut yk, false);
            for (j, &(_, o)) in pairs.iter().enumerate() {
                let dst = &mut out.data_mut()[o as usize * cout..(o as usize + 1) * cout];
                dst.iter_mut().zip(&yk[j * cout..(j + 1) * cout]).for_each(|(d, s)| *d += s);
            }
        }
        let rg = self.graph.rg(&[self.id, weight.id]);
        Ok(self.graph.push(out, Op::KernelConv(self.id, weight.id, map), rg))
    }
}
