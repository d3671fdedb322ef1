use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SumTo(usize),
    BroadcastTo(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    LogSoftmax(usize),
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    ConvGradInput { g: usize, w: usize, geom: ConvGeom },
    ConvGradWeight { x: usize, g: usize, geom: ConvGeom },
    AvgPool { x: usize, k: usize },
    AvgPoolAdjoint { g: usize, k: usize },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// A computation tape.
///
/// Nodes are appended in execution order, so every node's parents precede
/// it. Nodes created while recording is off, or whose parents are all
/// untracked, are stored as constants.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = self.recording.get() && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].tracked)
        };
        let op = if tracked { op } else { Op::Constant };
        Ok(self.push_raw(value, op, tracked))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    /// Reverse-mode gradients of the scalar `root` with respect to each of
    /// `wrt`.
    ///
    /// With `create_graph`, the backward computation is recorded on this
    /// graph and the returned gradients can be differentiated again.
    /// Otherwise they are constants. Targets that do not influence `root`
    /// get a zero gradient.
    pub fn grad<'g>(&'g self, root: Var<'g>, wrt: &[Var<'g>], create_graph: bool) -> Result<Vec<Var<'g>>> {
        let root_shape = root.shape();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        for w in wrt {
            if !self.tracked(w.id) {
                return Err(Error::UntrackedLeaf(w.id));
            }
        }
        let prev = self.recording.replace(create_graph);
        let out = self.backward_pass(root, wrt);
        self.recording.set(prev);
        out
    }

    fn backward_pass<'g>(&'g self, root: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        let n = root.id + 1;
        let mut is_target = vec![false; n];
        for w in wrt {
            if w.id < n {
                is_target[w.id] = true;
            }
        }
        // Nodes through which some target influences the root.
        let mut relevant = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            for id in 0..n {
                if !nodes[id].tracked {
                    continue;
                }
                relevant[id] = is_target[id] || parents_of(&nodes[id].op).iter().any(|&p| relevant[p]);
            }
        }

        let mut grads: Vec<Option<Var<'g>>> = vec![None; n];
        let mut results: Vec<Option<Var<'g>>> = vec![None; n];
        grads[root.id] = Some(self.constant(Tensor::ones(&root.shape())));

        for id in (0..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if is_target[id] {
                results[id] = Some(g);
            }
            let op = self.nodes.borrow()[id].op.clone();
            let contributions = self.vjp(id, &op, g, &relevant)?;
            for (p, c) in contributions {
                grads[p] = Some(match grads[p] {
                    Some(acc) => acc.add(c)?,
                    None => c,
                });
            }
        }

        wrt.iter()
            .map(|w| match results.get(w.id).and_then(|r| *r) {
                Some(g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(&w.shape()))),
            })
            .collect()
    }

    /// Vector-Jacobian products of node `id` for each relevant parent.
    fn vjp<'g>(&'g self, id: usize, op: &Op, g: Var<'g>, relevant: &[bool]) -> Result<Vec<(usize, Var<'g>)>> {
        let y = self.var(id);
        let v = |i: usize| self.var(i);
        let want = |i: usize| relevant[i];
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if want(a) {
                    out.push((a, g.sum_to(&v(a).shape())?));
                }
                if want(b) {
                    out.push((b, g.sum_to(&v(b).shape())?));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((a, g.sum_to(&v(a).shape())?));
                }
                if want(b) {
                    out.push((b, g.neg()?.sum_to(&v(b).shape())?));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((a, g.mul(v(b))?.sum_to(&v(a).shape())?));
                }
                if want(b) {
                    out.push((b, g.mul(v(a))?.sum_to(&v(b).shape())?));
                }
            }
            Op::Div(a, b) => {
                if want(a) {
                    out.push((a, g.div(v(b))?.sum_to(&v(a).shape())?));
                }
                if want(b) {
                    let gb = g.mul(y)?.div(v(b))?.neg()?;
                    out.push((b, gb.sum_to(&v(b).shape())?));
                }
            }
            Op::Neg(a) => out.push((a, g.neg()?)),
            Op::Scale(a, c) => out.push((a, g.scale(c)?)),
            Op::AddScalar(a) => out.push((a, g)),
            Op::MatMul(a, b) => {
                if want(a) {
                    out.push((a, g.matmul(v(b).transpose()?)?));
                }
                if want(b) {
                    out.push((b, v(a).transpose()?.matmul(g)?));
                }
            }
            Op::Transpose(a) => out.push((a, g.transpose()?)),
            Op::Reshape(a) => out.push((a, g.reshape(&v(a).shape())?)),
            Op::SumTo(a) => out.push((a, g.broadcast_to(&v(a).shape())?)),
            Op::BroadcastTo(a) => out.push((a, g.sum_to(&v(a).shape())?)),
            Op::Relu(a) => {
                // Derivative at exactly zero is taken as zero.
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                out.push((a, g.mul(self.constant(mask))?));
            }
            Op::Abs(a) => {
                let sign = self.value(a).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                out.push((a, g.mul(self.constant(sign))?));
            }
            Op::Sigmoid(a) => {
                let slope = y.mul(y.neg()?.add_scalar(1.0)?)?;
                out.push((a, g.mul(slope)?));
            }
            Op::Exp(a) => out.push((a, g.mul(y)?)),
            Op::Log(a) => out.push((a, g.div(v(a))?)),
            Op::Sqrt(a) => out.push((a, g.div(y.scale(2.0)?)?)),
            Op::LogSoftmax(a) => {
                let shape = y.shape();
                let mut row_shape = shape.clone();
                *row_shape.last_mut().expect("log_softmax on rank-0") = 1;
                let row_sum = g.sum_to(&row_shape)?;
                out.push((a, g.sub(y.exp()?.mul(row_sum)?)?));
            }
            Op::Conv2d { x, w, geom } => {
                if want(x) {
                    out.push((x, conv_grad_input(g, v(w), geom)?));
                }
                if want(w) {
                    out.push((w, conv_grad_weight(v(x), g, geom)?));
                }
            }
            Op::ConvGradInput { g: gg, w, geom } => {
                if want(gg) {
                    out.push((gg, conv(g, v(w), geom)?));
                }
                if want(w) {
                    out.push((w, conv_grad_weight(g, v(gg), geom)?));
                }
            }
            Op::ConvGradWeight { x, g: gg, geom } => {
                if want(x) {
                    out.push((x, conv_grad_input(v(gg), g, geom)?));
                }
                if want(gg) {
                    out.push((gg, conv(v(x), g, geom)?));
                }
            }
            Op::AvgPool { x, k } => {
                out.push((x, avg_pool_adjoint(g, k, &v(x).shape())?));
            }
            Op::AvgPoolAdjoint { g: gg, k, .. } => {
                out.push((gg, g.avg_pool2d(k)?));
            }
        }
        Ok(out)
    }
}

fn parents_of(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
            vec![a, b]
        }
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::SumTo(a)
        | Op::BroadcastTo(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sqrt(a)
        | Op::Abs(a)
        | Op::LogSoftmax(a) => vec![a],
        Op::Conv2d { x, w, .. } => vec![x, w],
        Op::ConvGradInput { g, w, .. } => vec![g, w],
        Op::ConvGradWeight { x, g, .. } => vec![x, g],
        Op::AvgPool { x, .. } => vec![x],
        Op::AvgPoolAdjoint { g, .. } => vec![g],
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn conv<'g>(x: Var<'g>, w: Var<'g>, geom: ConvGeom) -> Result<Var<'g>> {
    let value = kernels::conv2d(&geom, x.value().data(), w.value().data());
    let t = Tensor::new(geom.output_shape(), value)?;
    x.graph.push("conv2d", t, Op::Conv2d { x: x.id, w: w.id, geom }, &[x.id, w.id])
}

fn conv_grad_input<'g>(g: Var<'g>, w: Var<'g>, geom: ConvGeom) -> Result<Var<'g>> {
    let value = kernels::conv2d_grad_input(&geom, g.value().data(), w.value().data());
    let t = Tensor::new(geom.input_shape(), value)?;
    g.graph.push(
        "conv2d_grad_input",
        t,
        Op::ConvGradInput { g: g.id, w: w.id, geom },
        &[g.id, w.id],
    )
}

fn conv_grad_weight<'g>(x: Var<'g>, g: Var<'g>, geom: ConvGeom) -> Result<Var<'g>> {
    let value = kernels::conv2d_grad_weight(&geom, x.value().data(), g.value().data());
    let t = Tensor::new(geom.weight_shape(), value)?;
    x.graph.push(
        "conv2d_grad_weight",
        t,
        Op::ConvGradWeight { x: x.id, g: g.id, geom },
        &[x.id, g.id],
    )
}

fn avg_pool_adjoint<'g>(g: Var<'g>, k: usize, in_shape: &[usize]) -> Result<Var<'g>> {
    let value = kernels::avg_pool2d_adjoint(in_shape, k, g.value().data());
    let t = Tensor::new(in_shape.to_vec(), value)?;
    g.graph.push(
        "avg_pool2d_adjoint",
        t,
        Op::AvgPoolAdjoint { g: g.id, k },
        &[g.id],
    )
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn is_tracked(&self) -> bool {
        self.graph.tracked(self.id)
    }

    fn unary(self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'g>> {
        let t = self.value().map(f);
        self.graph.push(name, t, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let shape = kernels::broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| shape_err(name, a.shape(), b.shape()))?;
        let data = kernels::broadcast_binary(a.data(), a.shape(), b.data(), b.shape(), &shape, f);
        self.graph.push(name, Tensor::new(shape, data)?, op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.unary("neg", Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        self.unary("scale", Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        self.unary("add_scalar", Op::AddScalar(self.id), |x| x + c)
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary("relu", Op::Relu(self.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), kernels::sigmoid)
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Result<Var<'g>> {
        self.unary("log", Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        self.unary("sqrt", Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn abs(self) -> Result<Var<'g>> {
        self.unary("abs", Op::Abs(self.id), f64::abs)
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.mul(self)
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        self.graph.push(
            "matmul",
            Tensor::new(vec![m, n], c)?,
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 {
            return Err(shape_err("transpose", s, &[]));
        }
        let data = kernels::transpose2d(a.data(), s[0], s[1]);
        self.graph.push(
            "transpose",
            Tensor::new(vec![s[1], s[0]], data)?,
            Op::Transpose(self.id),
            &[self.id],
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let t = (*self.value()).clone().reshape(shape)?;
        self.graph.push("reshape", t, Op::Reshape(self.id), &[self.id])
    }

    /// Sums over broadcast dimensions down to `shape` (keeping rank).
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(self);
        }
        let compatible = kernels::broadcast_shape(shape, a.shape()).is_some_and(|s| s == a.shape());
        if !compatible {
            return Err(shape_err("sum_to", a.shape(), shape));
        }
        let data = kernels::sum_to(a.data(), a.shape(), shape);
        self.graph.push(
            "sum_to",
            Tensor::new(shape.to_vec(), data)?,
            Op::SumTo(self.id),
            &[self.id],
        )
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(self);
        }
        let compatible = kernels::broadcast_shape(a.shape(), shape).is_some_and(|s| s == shape);
        if !compatible {
            return Err(shape_err("broadcast_to", a.shape(), shape));
        }
        let data = kernels::broadcast_to(a.data(), a.shape(), shape);
        self.graph.push(
            "broadcast_to",
            Tensor::new(shape.to_vec(), data)?,
            Op::BroadcastTo(self.id),
            &[self.id],
        )
    }

    /// Sum of all elements as a `[1]` node.
    pub fn sum(self) -> Result<Var<'g>> {
        let rank = self.shape().len();
        self.sum_to(&vec![1; rank])?.reshape(&[1])
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Mean over the dimensions that are 1 in `shape`.
    pub fn mean_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let n = self.value().numel() / shape.iter().product::<usize>().max(1);
        self.sum_to(shape)?.scale(1.0 / n as f64)
    }

    /// Biased variance over the dimensions that are 1 in `shape`.
    pub fn var_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let mu = self.mean_to(shape)?;
        self.sub(mu)?.square()?.mean_to(shape)
    }

    /// Euclidean norm as a `[1]` node. At the origin the value is zero and
    /// no gradient flows.
    pub fn l2_norm(self) -> Result<Var<'g>> {
        let sq = self.square()?.sum()?;
        if sq.item() == 0.0 {
            return Ok(self.graph.constant(Tensor::scalar(0.0)));
        }
        sq.sqrt()
    }

    pub fn log_softmax(self) -> Result<Var<'g>> {
        let a = self.value();
        let n = *a.shape().last().ok_or_else(|| shape_err("log_softmax", a.shape(), &[]))?;
        let data = kernels::log_softmax_rows(a.data(), n);
        self.graph.push(
            "log_softmax",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::LogSoftmax(self.id),
            &[self.id],
        )
    }

    pub fn softmax(self) -> Result<Var<'g>> {
        self.log_softmax()?.exp()
    }

    /// 2-D convolution of NCHW input with OIHW weights.
    pub fn conv2d(self, weight: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            h: xs[2],
            w: xs[3],
            out_c: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        conv(self, weight, geom)
    }

    /// Non-overlapping `k×k` average pooling over NCHW input.
    pub fn avg_pool2d(self, k: usize) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(shape_err("avg_pool2d", &s, &[k, k]));
        }
        let data = kernels::avg_pool2d(&s, k, self.value().data());
        let out_shape = vec![s[0], s[1], s[2] / k, s[3] / k];
        self.graph.push(
            "avg_pool2d",
            Tensor::new(out_shape, data)?,
            Op::AvgPool { x: self.id, k },
            &[self.id],
        )
    }
}
