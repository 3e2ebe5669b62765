//! Define-by-run reverse-mode automatic differentiation.
//!
//! A `Graph` is a DAG of `ComputeNode`s built for one batch and thrown away.
//! Nodes are appended in construction order, so the node vector is already a
//! topological order: `forward` walks it left to right, `backward` right to
//! left. `detach` copies its input's value and propagates a zero adjoint,
//! which is how stop-gradient terms are realized.
//!
//! All probability work happens in log space; the only exponentiations live
//! inside `log_softmax` and `sigmoid`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node inside one `Graph`. Not valid across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// The closed set of supported operations.
#[derive(Debug, Clone)]
pub enum Op {
    /// Differentiable leaf; must be bound before `forward`.
    Input,
    /// Non-differentiable leaf with a fixed value.
    Constant,
    /// Strict rank-2 matrix product `[m,k] x [k,n] -> [m,n]`.
    MatMul { lhs: NodeId, rhs: NodeId },
    /// Elementwise sum of two same-shape tensors.
    Add { lhs: NodeId, rhs: NodeId },
    Relu { arg: NodeId },
    /// Row gather from a rank-2 table: `ids` select rows.
    Gather { table: NodeId, ids: Vec<usize> },
    /// Log-softmax along the last dimension of a rank-2 tensor.
    LogSoftmax { arg: NodeId },
    /// Sum of all elements, producing a 1x1 tensor.
    Sum { arg: NodeId },
    ScalarMul { arg: NodeId, factor: f64 },
    /// Identity forward, zero adjoint to the parent.
    Detach { arg: NodeId },
    Sigmoid { arg: NodeId },
    /// Elementwise natural log (inputs must be positive).
    Log { arg: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Relu { .. } => "relu",
            Op::Gather { .. } => "embedding-gather",
            Op::LogSoftmax { .. } => "log-softmax-lastdim",
            Op::Sum { .. } => "sum",
            Op::ScalarMul { .. } => "scalar-mul",
            Op::Detach { .. } => "detach",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Log { .. } => "log",
        }
    }
}

/// One vertex of the DAG: op, static shape, cached forward value and adjoint.
#[derive(Debug, Clone)]
pub struct ComputeNode {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor>,
    adjoint: Option<Tensor>,
}

/// A single-owner compute graph. Shapes are checked when ops are built, so
/// shape errors surface at construction; `forward` can only fail on unbound
/// inputs or non-finite results.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<ComputeNode>,
    forward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor>) -> NodeId {
        self.nodes.push(ComputeNode {
            op,
            shape,
            value,
            adjoint: None,
        });
        self.forward_done = false;
        NodeId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn dims2_of(&self, id: NodeId, op: &'static str, at: usize) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                node: at,
                op,
                detail: format!("operand {:?} has non rank-2 shape {:?}", id, other),
            }),
        }
    }

    /// Unbound differentiable leaf.
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Input, shape.to_vec(), None)
    }

    /// Differentiable leaf bound to `value` immediately.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Input, shape, Some(value))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant, shape, Some(value))
    }

    /// Bind (or rebind) an input node's value. Rebinding invalidates any
    /// cached forward pass.
    pub fn bind(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id.0)
            .ok_or_else(|| Error::Graph(format!("no node {id:?}")))?;
        if !matches!(node.op, Op::Input) {
            return Err(Error::Graph(format!("node {id:?} is not an input")));
        }
        if node.shape != value.shape() {
            return Err(Error::Shape {
                node: id.0,
                op: "input",
                detail: format!("bound {:?}, declared {:?}", value.shape(), node.shape),
            });
        }
        node.value = Some(value);
        self.forward_done = false;
        Ok(())
    }

    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let at = self.nodes.len();
        let (m, k) = self.dims2_of(lhs, "matmul", at)?;
        let (k2, n) = self.dims2_of(rhs, "matmul", at)?;
        if k != k2 {
            return Err(Error::Shape {
                node: at,
                op: "matmul",
                detail: format!("inner dims differ: [{m},{k}] x [{k2},{n}]"),
            });
        }
        Ok(self.push(Op::MatMul { lhs, rhs }, vec![m, n], None))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let at = self.nodes.len();
        if self.shape_of(lhs) != self.shape_of(rhs) {
            return Err(Error::Shape {
                node: at,
                op: "add",
                detail: format!(
                    "{:?} vs {:?}",
                    self.shape_of(lhs),
                    self.shape_of(rhs)
                ),
            });
        }
        let shape = self.shape_of(lhs).to_vec();
        Ok(self.push(Op::Add { lhs, rhs }, shape, None))
    }

    /// `lhs - rhs`, composed from the primitive op set.
    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let neg = self.scalar_mul(rhs, -1.0);
        self.add(lhs, neg)
    }

    pub fn relu(&mut self, arg: NodeId) -> NodeId {
        let shape = self.shape_of(arg).to_vec();
        self.push(Op::Relu { arg }, shape, None)
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let at = self.nodes.len();
        let (rows, cols) = self.dims2_of(table, "embedding-gather", at)?;
        if ids.is_empty() {
            return Err(Error::Shape {
                node: at,
                op: "embedding-gather",
                detail: "empty id list".into(),
            });
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                node: at,
                op: "embedding-gather",
                detail: format!("row {bad} out of range for table with {rows} rows"),
            });
        }
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), cols],
            None,
        ))
    }

    pub fn log_softmax(&mut self, arg: NodeId) -> Result<NodeId> {
        let at = self.nodes.len();
        let (r, c) = self.dims2_of(arg, "log-softmax-lastdim", at)?;
        Ok(self.push(Op::LogSoftmax { arg }, vec![r, c], None))
    }

    pub fn sum(&mut self, arg: NodeId) -> NodeId {
        self.push(Op::Sum { arg }, vec![1, 1], None)
    }

    pub fn scalar_mul(&mut self, arg: NodeId, factor: f64) -> NodeId {
        let shape = self.shape_of(arg).to_vec();
        self.push(Op::ScalarMul { arg, factor }, shape, None)
    }

    pub fn detach(&mut self, arg: NodeId) -> NodeId {
        let shape = self.shape_of(arg).to_vec();
        self.push(Op::Detach { arg }, shape, None)
    }

    pub fn sigmoid(&mut self, arg: NodeId) -> NodeId {
        let shape = self.shape_of(arg).to_vec();
        self.push(Op::Sigmoid { arg }, shape, None)
    }

    pub fn log(&mut self, arg: NodeId) -> NodeId {
        let shape = self.shape_of(arg).to_vec();
        self.push(Op::Log { arg }, shape, None)
    }

    /// Cached forward value of a node (after `forward`).
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .and_then(|n| n.value.as_ref())
            .ok_or_else(|| Error::Graph(format!("node {id:?} has no value; run forward first")))
    }

    /// Adjoint of a node after `backward`. Inputs unreachable from the root
    /// (e.g. behind a `detach`) report a zero tensor of their shape.
    pub fn adjoint(&self, id: NodeId) -> Result<Tensor> {
        let node = self
            .nodes
            .get(id.0)
            .ok_or_else(|| Error::Graph(format!("no node {id:?}")))?;
        Ok(node
            .adjoint
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&node.shape)))
    }

    /// Evaluate every node in construction order and return the root value.
    /// Intermediate values stay cached for `backward`.
    pub fn forward(&mut self, root: NodeId) -> Result<Tensor> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("no node {root:?}")));
        }
        for idx in 0..self.nodes.len() {
            let value = match &self.nodes[idx].op {
                Op::Input => match &self.nodes[idx].value {
                    Some(_) => continue,
                    None => {
                        return Err(Error::Graph(format!("input node {idx} is unbound")));
                    }
                },
                Op::Constant => continue,
                Op::MatMul { lhs, rhs } => {
                    let a = self.nodes[lhs.0].value.as_ref().expect("parent evaluated");
                    let b = self.nodes[rhs.0].value.as_ref().expect("parent evaluated");
                    matmul_forward(a, b)
                }
                Op::Add { lhs, rhs } => {
                    let a = self.nodes[lhs.0].value.as_ref().expect("parent evaluated");
                    let b = self.nodes[rhs.0].value.as_ref().expect("parent evaluated");
                    let vals = a
                        .values()
                        .iter()
                        .zip(b.values())
                        .map(|(x, y)| x + y)
                        .collect();
                    Tensor::new(a.shape().to_vec(), vals).expect("shape checked")
                }
                Op::Relu { arg } => {
                    let x = self.nodes[arg.0].value.as_ref().expect("parent evaluated");
                    let vals = x.values().iter().map(|v| v.max(0.0)).collect();
                    Tensor::new(x.shape().to_vec(), vals).expect("shape checked")
                }
                Op::Gather { table, ids } => {
                    let t = self.nodes[table.0].value.as_ref().expect("parent evaluated");
                    let (_, cols) = t.dims2().expect("rank checked");
                    let mut vals = Vec::with_capacity(ids.len() * cols);
                    for &row in ids {
                        vals.extend_from_slice(&t.values()[row * cols..(row + 1) * cols]);
                    }
                    Tensor::new(vec![ids.len(), cols], vals).expect("shape checked")
                }
                Op::LogSoftmax { arg } => {
                    let x = self.nodes[arg.0].value.as_ref().expect("parent evaluated");
                    log_softmax_forward(x)
                }
                Op::Sum { arg } => {
                    let x = self.nodes[arg.0].value.as_ref().expect("parent evaluated");
                    Tensor::scalar(x.values().iter().sum())
                }
                Op::ScalarMul { arg, factor } => {
                    let x = self.nodes[arg.0].value.as_ref().expect("parent evaluated");
                    let vals = x.values().iter().map(|v| v * factor).collect();
                    Tensor::new(x.shape().to_vec(), vals).expect("shape checked")
                }
                Op::Detach { arg } => self.nodes[arg.0]
                    .value
                    .clone()
                    .expect("parent evaluated"),
                Op::Sigmoid { arg } => {
                    let x = self.nodes[arg.0].value.as_ref().expect("parent evaluated");
                    let vals = x.values().iter().map(|v| sigmoid(*v)).collect();
                    Tensor::new(x.shape().to_vec(), vals).expect("shape checked")
                }
                Op::Log { arg } => {
                    let x = self.nodes[arg.0].value.as_ref().expect("parent evaluated");
                    let vals = x.values().iter().map(|v| v.ln()).collect();
                    Tensor::new(x.shape().to_vec(), vals).expect("shape checked")
                }
            };
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    node: idx,
                    op: self.nodes[idx].op.name(),
                });
            }
            self.nodes[idx].value = Some(value);
            self.nodes[idx].adjoint = None;
        }
        self.forward_done = true;
        Ok(self.nodes[root.0].value.clone().expect("just evaluated"))
    }

    /// Reverse pass from a scalar root. Fills adjoints for every node on a
    /// differentiable path; `detach` stops propagation.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.forward_done {
            return Err(Error::Graph("backward before forward".into()));
        }
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Graph(format!("no node {root:?}")))?;
        if root_node.value.as_ref().map(|v| v.numel()) != Some(1) {
            return Err(Error::Graph(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.shape
            )));
        }
        for node in &mut self.nodes {
            node.adjoint = None;
        }
        self.nodes[root.0].adjoint = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let grad = match self.nodes[idx].adjoint.clone() {
                Some(g) => g,
                None => continue,
            };
            // Clone the op descriptor so we can mutate parent adjoints below.
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Input | Op::Constant | Op::Detach { .. } => {}
                Op::MatMul { lhs, rhs } => {
                    let a = self.nodes[lhs.0].value.clone().expect("forward ran");
                    let b = self.nodes[rhs.0].value.clone().expect("forward ran");
                    let da = matmul_grad_lhs(&grad, &b);
                    let db = matmul_grad_rhs(&a, &grad);
                    self.accumulate(lhs, da);
                    self.accumulate(rhs, db);
                }
                Op::Add { lhs, rhs } => {
                    self.accumulate(lhs, grad.clone());
                    self.accumulate(rhs, grad);
                }
                Op::Relu { arg } => {
                    let x = self.nodes[arg.0].value.as_ref().expect("forward ran");
                    let vals = x
                        .values()
                        .iter()
                        .zip(grad.values())
                        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    let d = Tensor::new(x.shape().to_vec(), vals).expect("same shape");
                    self.accumulate(arg, d);
                }
                Op::Gather { table, ids } => {
                    let shape = self.nodes[table.0].shape.clone();
                    let cols = shape[1];
                    let mut d = Tensor::zeros(&shape);
                    for (out_row, &id) in ids.iter().enumerate() {
                        let src = &grad.values()[out_row * cols..(out_row + 1) * cols];
                        let dst = &mut d.values_mut()[id * cols..(id + 1) * cols];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                    self.accumulate(table, d);
                }
                Op::LogSoftmax { arg } => {
                    let y = self.nodes[idx].value.as_ref().expect("forward ran");
                    let d = log_softmax_backward(y, &grad);
                    self.accumulate(arg, d);
                }
                Op::Sum { arg } => {
                    let g = grad.scalar_value().expect("sum output is scalar");
                    let shape = self.nodes[arg.0].shape.clone();
                    let mut d = Tensor::zeros(&shape);
                    for v in d.values_mut() {
                        *v = g;
                    }
                    self.accumulate(arg, d);
                }
                Op::ScalarMul { arg, factor } => {
                    let vals = grad.values().iter().map(|g| g * factor).collect();
                    let d = Tensor::new(grad.shape().to_vec(), vals).expect("same shape");
                    self.accumulate(arg, d);
                }
                Op::Sigmoid { arg } => {
                    let y = self.nodes[idx].value.as_ref().expect("forward ran");
                    let vals = y
                        .values()
                        .iter()
                        .zip(grad.values())
                        .map(|(y, g)| g * y * (1.0 - y))
                        .collect();
                    let d = Tensor::new(y.shape().to_vec(), vals).expect("same shape");
                    self.accumulate(arg, d);
                }
                Op::Log { arg } => {
                    let x = self.nodes[arg.0].value.as_ref().expect("forward ran");
                    let vals = x
                        .values()
                        .iter()
                        .zip(grad.values())
                        .map(|(x, g)| g / x)
                        .collect();
                    let d = Tensor::new(x.shape().to_vec(), vals).expect("same shape");
                    self.accumulate(arg, d);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        let node = &mut self.nodes[id.0];
        match &mut node.adjoint {
            Some(existing) => {
                existing.add_scaled(&delta, 1.0).expect("same shape");
            }
            None => node.adjoint = Some(delta),
        }
    }

    /// Gradients of the most recent `backward` root with respect to the
    /// given input nodes. Unreached inputs report zeros.
    pub fn input_gradients(&self, inputs: &[NodeId]) -> Result<HashMap<NodeId, Tensor>> {
        let mut out = HashMap::with_capacity(inputs.len());
        for &id in inputs {
            out.insert(id, self.adjoint(id)?);
        }
        Ok(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2().expect("rank checked");
    let (_, n) = b.dims2().expect("rank checked");
    let av = a.values();
    let bv = b.values();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = av[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bv[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, b) in orow.iter_mut().zip(brow) {
                *o += aip * b;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("shape consistent")
}

/// d(A@B)/dA = G @ B^T
fn matmul_grad_lhs(grad: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = grad.dims2().expect("rank-2");
    let (k, _) = b.dims2().expect("rank-2");
    let gv = grad.values();
    let bv = b.values();
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += gv[i * n + j] * bv[p * n + j];
            }
            out[i * k + p] = acc;
        }
    }
    Tensor::new(vec![m, k], out).expect("shape consistent")
}

/// d(A@B)/dB = A^T @ G
fn matmul_grad_rhs(a: &Tensor, grad: &Tensor) -> Tensor {
    let (m, k) = a.dims2().expect("rank-2");
    let (_, n) = grad.dims2().expect("rank-2");
    let av = a.values();
    let gv = grad.values();
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let aip = av[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let grow = &gv[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, g) in orow.iter_mut().zip(grow) {
                *o += aip * g;
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("shape consistent")
}

fn log_softmax_forward(x: &Tensor) -> Tensor {
    let (rows, cols) = x.dims2().expect("rank checked");
    let xv = x.values();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &xv[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    Tensor::new(vec![rows, cols], out).expect("shape consistent")
}

/// dx_i = g_i - softmax_i * sum_j(g_j), rowwise; softmax recovered from the
/// cached output by exponentiation.
fn log_softmax_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    let (rows, cols) = y.dims2().expect("rank-2");
    let yv = y.values();
    let gv = grad.values();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let gsum: f64 = gv[r * cols..(r + 1) * cols].iter().sum();
        for c in 0..cols {
            let i = r * cols + c;
            out[i] = gv[i] - yv[i].exp() * gsum;
        }
    }
    Tensor::new(vec![rows, cols], out).expect("shape consistent")
}
