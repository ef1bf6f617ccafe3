//! Reverse-mode differentiation over a fixed, small operation set.
//!
//! A [`Graph`] evaluates eagerly: each builder method computes its value
//! immediately and records how it was produced. [`Graph::backward`] then
//! walks the record in reverse creation order, which is a valid reverse
//! topological order because inputs always precede their consumers.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rope::{rotate_slice, RopeConfig};
use crate::tensor::{log_softmax_slice, matmul, softmax_slice, Tensor};

/// Identifies a trainable parameter across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
pub struct Gradient {
    pub param: ParamId,
    pub value: Tensor,
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Log(NodeId),
    Sum(NodeId),
    SumSquares(NodeId),
    L1(NodeId),
    Rope {
        input: NodeId,
        offsets: Vec<f64>,
        config: RopeConfig,
    },
    Gather(NodeId, Vec<usize>),
    Transpose(NodeId),
    Reshape(NodeId),
    Pick(NodeId, usize),
    Step(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
            Op::L1(_) => "l1_norm",
            Op::Rope { .. } => "rope",
            Op::Gather(..) => "gather_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Pick(..) => "pick",
            Op::Step(_) => "step",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[id.0].value)
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.value(id).item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        value.check_finite(op.name())?;
        let requires_grad = match &op {
            Op::Leaf(p) => p.is_some(),
            _ => op_inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn push_shared(&mut self, value: Arc<Tensor>, param: Option<ParamId>) -> Result<NodeId> {
        value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            requires_grad: param.is_some(),
            op: Op::Leaf(param),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn param(&mut self, id: ParamId, value: impl Into<Arc<Tensor>>) -> Result<NodeId> {
        self.push_shared(value.into(), Some(id))
    }

    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Result<NodeId> {
        self.push_shared(value.into(), None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product; with a constant operand this is a mask.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = crate::tensor::softmax(self.value(a))?;
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Empty("log_softmax"));
        }
        let mut out = Tensor::zeros(x.shape());
        let c = x.cols();
        for (xs, os) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
            log_softmax_slice(xs, os);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::from_raw(vec![], vec![self.value(a).sum()]);
        self.push(v, Op::Sum(a))
    }

    /// Squared L2 norm.
    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Tensor::from_raw(vec![], vec![s]), Op::SumSquares(a))
    }

    pub fn l1_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().map(|x| x.abs()).sum();
        self.push(Tensor::from_raw(vec![], vec![s]), Op::L1(a))
    }

    /// Rotates each row of `a` (or `a` itself, if a vector) by its position.
    pub fn rope(&mut self, a: NodeId, positions: &[usize], config: &RopeConfig) -> Result<NodeId> {
        let offsets: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
        let x = self.value(a);
        let width = config.head_dim();
        if x.cols() != width || x.len() != width * offsets.len() {
            return Err(Error::shape(
                "rope",
                format!("{:?} with {} positions, head dim {width}", x.shape(), offsets.len()),
            ));
        }
        let thetas = config.thetas();
        let mut out = x.clone();
        for (row, &off) in out.data_mut().chunks_mut(width).zip(&offsets) {
            rotate_slice(row, off, config, &thetas);
        }
        self.push(
            out,
            Op::Rope {
                input: a,
                offsets,
                config: *config,
            },
        )
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(a).gather_rows(indices)?;
        self.push(v, Op::Gather(a, indices.to_vec()))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        self.push(v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a))
    }

    /// One element of `a` (flat index) as a scalar.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let x = self.value(a);
        let v = *x
            .data()
            .get(index)
            .ok_or_else(|| Error::OutOfRange(format!("pick {index} of {}", x.len())))?;
        self.push(Tensor::from_raw(vec![], vec![v]), Op::Pick(a, index))
    }

    /// Binary indicator `a >= threshold`. Has no derivative; `backward`
    /// fails if a parameter reaches the loss through it.
    pub fn step(&mut self, a: NodeId, threshold: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x >= threshold { 1.0 } else { 0.0 });
        self.push(v, Op::Step(a))
    }

    /// Reverse-mode derivatives of the scalar `loss` with respect to every
    /// parameter leaf. A parameter registered on several leaves receives
    /// the sum of their gradients; unreached parameters get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Gradient>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out: BTreeMap<ParamId, Tensor> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf(Some(p)) => match out.get_mut(p) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(*p, g);
                    }
                },
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let bt = self.value(*b).transpose()?;
                        self.accumulate(&mut grads, *a, matmul(&g, &bt)?);
                    }
                    if self.needs(*b) {
                        let at = self.value(*a).transpose()?;
                        self.accumulate(&mut grads, *b, matmul(&at, &g)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, g.clone());
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.zip_map(self.value(*b), "mul'", |x, y| x * y)?;
                        self.accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.zip_map(self.value(*a), "mul'", |x, y| x * y)?;
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, f) => self.accumulate(&mut grads, *a, g.map(|x| x * f)),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut ga = Tensor::zeros(y.shape());
                    for ((ys, gs), os) in y
                        .data()
                        .chunks(c)
                        .zip(g.data().chunks(c))
                        .zip(ga.data_mut().chunks_mut(c))
                    {
                        let inner = crate::tensor::dot(ys, gs);
                        for ((o, &yv), &gv) in os.iter_mut().zip(ys).zip(gs) {
                            *o = yv * (gv - inner);
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let x = self.value(*a);
                    let c = x.cols();
                    let mut ga = Tensor::zeros(x.shape());
                    let mut probs = vec![0.0; c];
                    for ((xs, gs), os) in x
                        .data()
                        .chunks(c)
                        .zip(g.data().chunks(c))
                        .zip(ga.data_mut().chunks_mut(c))
                    {
                        softmax_slice(xs, &mut probs);
                        let total: f64 = gs.iter().sum();
                        for ((o, &p), &gv) in os.iter_mut().zip(&probs).zip(gs) {
                            *o = gv - p * total;
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(*a), "log'", |gv, x| gv / x)?;
                    ga.check_finite("log gradient")?;
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g.item()?;
                    self.accumulate(&mut grads, *a, Tensor::filled(self.value(*a).shape(), s));
                }
                Op::SumSquares(a) => {
                    let s = g.item()?;
                    self.accumulate(&mut grads, *a, self.value(*a).map(|x| 2.0 * s * x));
                }
                Op::L1(a) => {
                    let s = g.item()?;
                    let ga = self.value(*a).map(|x| {
                        if x > 0.0 {
                            s
                        } else if x < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Rope {
                    input,
                    offsets,
                    config,
                } => {
                    let thetas = config.thetas();
                    let mut ga = g;
                    for (row, &off) in ga.data_mut().chunks_mut(config.head_dim()).zip(offsets) {
                        rotate_slice(row, -off, config, &thetas);
                    }
                    self.accumulate(&mut grads, *input, ga);
                }
                Op::Gather(a, indices) => {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.shape());
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => self.accumulate(&mut grads, *a, g.transpose()?),
                Op::Reshape(a) => {
                    let ga = g.reshape(self.value(*a).shape())?;
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Pick(a, index) => {
                    let mut ga = Tensor::zeros(self.value(*a).shape());
                    ga.data_mut()[*index] = g.item()?;
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Step(_) => return Err(Error::Unsupported("step")),
            }
        }

        // Parameters that never reached the loss still get an explicit zero.
        for node in &self.nodes[..=loss.0] {
            if let Op::Leaf(Some(p)) = node.op {
                out.entry(p)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out
            .into_iter()
            .map(|(param, value)| Gradient { param, value })
            .collect())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf(_) => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Log(a)
        | Op::Sum(a)
        | Op::SumSquares(a)
        | Op::L1(a)
        | Op::Gather(a, _)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::Pick(a, _)
        | Op::Step(a) => vec![*a],
        Op::Rope { input, .. } => vec![*input],
    }
}
