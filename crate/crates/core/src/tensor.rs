//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation is recorded on a per-step [`Graph`]. Calling
//! [`Graph::backward`] on a scalar output walks the record in reverse and
//! accumulates exact gradients for every tensor that requires them. The
//! record is meant to live for one training step and be dropped afterwards.
//!
//! Broadcasting is restricted to the leading-axis case: a tensor may be
//! expanded to any shape of which its own shape is a suffix. Everything
//! else is a shape error.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub type NodeId = usize;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Dense row-major float64 tensor. Cloning is cheap (the payload is shared).
///
/// A tensor is either detached (plain data, `node_id() == None`) or attached
/// to a [`Graph`] that recorded how it was produced. Only `Graph::leaf` can
/// mark a tensor as requiring gradients.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    graph_id: u64,
    node_id: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Rc::new(data),
            requires_grad: false,
            graph_id: 0,
            node_id: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: Rc::new(vec![v]),
            requires_grad: false,
            graph_id: 0,
            node_id: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Rc::new(vec![0.0; numel]),
            requires_grad: false,
            graph_id: 0,
            node_id: None,
        }
    }

    /// Builds a `[rows, cols]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("from_rows: empty row list"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row 0 has {} entries, row {} has {}", cols, i, r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node_id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// A plain-data copy with no graph linkage.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            requires_grad: false,
            graph_id: 0,
            node_id: None,
        }
    }

    /// Detached copy with one coordinate replaced. Used by the
    /// finite-difference oracle.
    pub fn with_coordinate(&self, idx: usize, v: f64) -> Result<Tensor> {
        if idx >= self.data.len() {
            return Err(Error::contract(format!(
                "with_coordinate: index {} out of {}",
                idx,
                self.data.len()
            )));
        }
        let mut data = self.data.to_vec();
        data[idx] = v;
        Tensor::new(self.shape.clone(), data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Operation kinds accepted by [`Graph::forward_op`]. Attributes that are
/// static per call (slice bounds, broadcast target) ride along in the enum.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Subtract,
    Multiply,
    MatMul,
    Relu,
    Tanh,
    Exp,
    Log,
    Sum,
    Mean,
    Square,
    Concat,
    Slice { start: usize, len: usize },
    Broadcast { shape: Vec<usize> },
    SoftmaxLastAxis,
    L2NormalizeLastAxis,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Subtract => "subtract",
            OpKind::Multiply => "multiply",
            OpKind::MatMul => "matmul",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Square => "square",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Broadcast { .. } => "broadcast",
            OpKind::SoftmaxLastAxis => "softmax-over-last-axis",
            OpKind::L2NormalizeLastAxis => "l2-normalize-over-last-axis",
        }
    }
}

/// Recorded provenance of one node.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Subtract(NodeId, NodeId),
    Multiply(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Concat(Vec<NodeId>),
    Slice { input: NodeId, start: usize, len: usize },
    Broadcast { input: NodeId },
    SoftmaxLast(NodeId),
    L2NormalizeLast(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Per-step computation record. Not `Sync`; independent graphs may live on
/// independent threads, but a single graph belongs to one thread.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by node id, produced by [`Graph::backward`].
///
/// Every tensor with `requires_grad` that is reachable from the
/// differentiated scalar has an entry of identical shape.
#[derive(Debug, Default)]
pub struct GradientMap {
    map: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        t.node_id.and_then(|id| self.map.get(&id))
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    /// Gradient for `t`, or zeros when `t` was unreachable from the output.
    pub fn grad_or_zeros(&self, t: &Tensor) -> Tensor {
        match self.get(t) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape().to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn check_finite(data: &[f64], context: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(context.to_string()))
    }
}

fn fmt_shape(s: &[usize]) -> String {
    format!("{:?}", s)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a leaf node holding `t`'s data. `requires_grad` leaves are the
    /// only tensors that receive entries in the gradient map.
    pub fn leaf(&self, t: &Tensor, requires_grad: bool) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let attached = Tensor {
            shape: t.shape.clone(),
            data: Rc::clone(&t.data),
            requires_grad,
            graph_id: self.id,
            node_id: Some(id),
        };
        nodes.push(Node {
            op: Op::Leaf,
            value: attached.clone(),
        });
        attached
    }

    pub fn constant(&self, t: &Tensor) -> Tensor {
        self.leaf(t, false)
    }

    pub fn constant_scalar(&self, v: f64) -> Tensor {
        self.leaf(&Tensor::scalar(v), false)
    }

    /// Resolves an input tensor to a node on this graph, auto-attaching
    /// detached tensors as constants.
    fn input_id(&self, t: &Tensor, op: &str) -> Result<NodeId> {
        match t.node_id {
            Some(id) if t.graph_id == self.id => Ok(id),
            Some(_) => Err(Error::contract(format!(
                "{}: input tensor belongs to a different graph",
                op
            ))),
            None => Ok(self.constant(t).node_id.unwrap()),
        }
    }

    fn record(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, name: &str) -> Result<Tensor> {
        check_finite(&data, name)?;
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let out = Tensor {
            shape,
            data: Rc::new(data),
            requires_grad,
            graph_id: self.id,
            node_id: Some(id),
        };
        nodes.push(Node {
            op,
            value: out.clone(),
        });
        Ok(out)
    }

    /// Generic entry point dispatching on [`OpKind`]. The typed methods below
    /// do the actual work; this exists so callers can enumerate kinds.
    pub fn forward_op(&self, kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        let want = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(Error::contract(format!(
                    "{} expects {} input(s), got {}",
                    kind.name(),
                    n,
                    inputs.len()
                )))
            } else {
                Ok(())
            }
        };
        match kind {
            OpKind::Add => {
                want(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Subtract => {
                want(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Multiply => {
                want(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::MatMul => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                want(1)?;
                self.relu(inputs[0])
            }
            OpKind::Tanh => {
                want(1)?;
                self.tanh(inputs[0])
            }
            OpKind::Exp => {
                want(1)?;
                self.exp(inputs[0])
            }
            OpKind::Log => {
                want(1)?;
                self.log(inputs[0])
            }
            OpKind::Sum => {
                want(1)?;
                self.sum(inputs[0])
            }
            OpKind::Mean => {
                want(1)?;
                self.mean(inputs[0])
            }
            OpKind::Square => {
                want(1)?;
                self.square(inputs[0])
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Slice { start, len } => {
                want(1)?;
                self.slice_last(inputs[0], *start, *len)
            }
            OpKind::Broadcast { shape } => {
                want(1)?;
                self.broadcast_to(inputs[0], shape)
            }
            OpKind::SoftmaxLastAxis => {
                want(1)?;
                self.softmax_last(inputs[0])
            }
            OpKind::L2NormalizeLastAxis => {
                want(1)?;
                self.l2_normalize_last(inputs[0])
            }
        }
    }

    fn elementwise_binary(
        &self,
        a: &Tensor,
        b: &Tensor,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::shape(
                name,
                format!("{} vs {}", fmt_shape(&a.shape), fmt_shape(&b.shape)),
            ));
        }
        let ia = self.input_id(a, name)?;
        let ib = self.input_id(b, name)?;
        let data: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        self.record(op(ia, ib), a.shape.clone(), data, a.requires_grad || b.requires_grad, name)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise_binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise_binary(a, b, "subtract", |x, y| x - y, Op::Subtract)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise_binary(a, b, "multiply", |x, y| x * y, Op::Multiply)
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{} x {}", fmt_shape(&a.shape), fmt_shape(&b.shape)),
            ));
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let ia = self.input_id(a, "matmul")?;
        let ib = self.input_id(b, "matmul")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                let crow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
        self.record(Op::MatMul(ia, ib), vec![m, n], data, a.requires_grad || b.requires_grad, "matmul")
    }

    fn elementwise_unary(
        &self,
        a: &Tensor,
        name: &str,
        f: impl Fn(f64) -> f64,
        op: impl Fn(NodeId) -> Op,
    ) -> Result<Tensor> {
        let ia = self.input_id(a, name)?;
        let data: Vec<f64> = a.data.iter().map(|&x| f(x)).collect();
        self.record(op(ia), a.shape.clone(), data, a.requires_grad, name)
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        self.elementwise_unary(a, "relu", |x| x.max(0.0), Op::Relu)
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        self.elementwise_unary(a, "tanh", f64::tanh, Op::Tanh)
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        self.elementwise_unary(a, "exp", f64::exp, Op::Exp)
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = a.data.iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {}", bad)));
        }
        self.elementwise_unary(a, "log", f64::ln, Op::Log)
    }

    pub fn square(&self, a: &Tensor) -> Result<Tensor> {
        self.elementwise_unary(a, "square", |x| x * x, Op::Square)
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let ia = self.input_id(a, "sum")?;
        let s: f64 = a.data.iter().sum();
        self.record(Op::Sum(ia), vec![], vec![s], a.requires_grad, "sum")
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        if a.data.is_empty() {
            return Err(Error::domain("mean", "zero elements"));
        }
        let ia = self.input_id(a, "mean")?;
        let s: f64 = a.data.iter().sum();
        let m = s / a.data.len() as f64;
        self.record(Op::Mean(ia), vec![], vec![m], a.requires_grad, "mean")
    }

    /// Concatenation along the last axis.
    pub fn concat(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat: no inputs"));
        }
        let lead = &parts[0].shape[..parts[0].shape.len().saturating_sub(1)];
        let ndim = parts[0].shape.len();
        if ndim == 0 {
            return Err(Error::shape("concat", "scalar inputs"));
        }
        let mut last_total = 0;
        for p in parts {
            if p.shape.len() != ndim || &p.shape[..ndim - 1] != lead {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "{} vs {}",
                        fmt_shape(&parts[0].shape),
                        fmt_shape(&p.shape)
                    ),
                ));
            }
            last_total += p.shape[ndim - 1];
        }
        let ids: Vec<NodeId> = parts
            .iter()
            .map(|p| self.input_id(p, "concat"))
            .collect::<Result<_>>()?;
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * last_total);
        for r in 0..rows {
            for p in parts {
                let w = p.shape[ndim - 1];
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(last_total);
        let rg = parts.iter().any(|p| p.requires_grad);
        self.record(Op::Concat(ids), shape, data, rg, "concat")
    }

    /// Contiguous slice `[start, start+len)` of the last axis.
    pub fn slice_last(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let ndim = a.shape.len();
        if ndim == 0 {
            return Err(Error::shape("slice", "scalar input"));
        }
        let w = a.shape[ndim - 1];
        if start + len > w || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("range {}..{} of last axis {}", start, start + len, w),
            ));
        }
        let ia = self.input_id(a, "slice")?;
        let rows: usize = a.shape[..ndim - 1].iter().product();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&a.data[r * w + start..r * w + start + len]);
        }
        let mut shape = a.shape[..ndim - 1].to_vec();
        shape.push(len);
        self.record(Op::Slice { input: ia, start, len }, shape, data, a.requires_grad, "slice")
    }

    /// Leading-axis broadcast: `a.shape` must be a suffix of `target`.
    pub fn broadcast_to(&self, a: &Tensor, target: &[usize]) -> Result<Tensor> {
        if target.len() < a.shape.len() || target[target.len() - a.shape.len()..] != a.shape[..] {
            return Err(Error::shape(
                "broadcast",
                format!(
                    "{} is not a suffix of {}",
                    fmt_shape(&a.shape),
                    fmt_shape(target)
                ),
            ));
        }
        let ia = self.input_id(a, "broadcast")?;
        let lead: usize = target[..target.len() - a.shape.len()].iter().product();
        let mut data = Vec::with_capacity(lead * a.data.len());
        for _ in 0..lead {
            data.extend_from_slice(&a.data);
        }
        self.record(Op::Broadcast { input: ia }, target.to_vec(), data, a.requires_grad, "broadcast")
    }

    pub fn softmax_last(&self, a: &Tensor) -> Result<Tensor> {
        let ndim = a.shape.len();
        if ndim == 0 || a.shape[ndim - 1] == 0 {
            return Err(Error::shape("softmax-over-last-axis", fmt_shape(&a.shape)));
        }
        let ia = self.input_id(a, "softmax-over-last-axis")?;
        let w = a.shape[ndim - 1];
        let rows = a.data.len() / w;
        let mut data = vec![0.0; a.data.len()];
        for r in 0..rows {
            let row = &a.data[r * w..(r + 1) * w];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                data[r * w + j] = e;
                denom += e;
            }
            for v in &mut data[r * w..(r + 1) * w] {
                *v /= denom;
            }
        }
        self.record(Op::SoftmaxLast(ia), a.shape.clone(), data, a.requires_grad, "softmax-over-last-axis")
    }

    pub fn l2_normalize_last(&self, a: &Tensor) -> Result<Tensor> {
        let ndim = a.shape.len();
        if ndim == 0 || a.shape[ndim - 1] == 0 {
            return Err(Error::shape("l2-normalize-over-last-axis", fmt_shape(&a.shape)));
        }
        let w = a.shape[ndim - 1];
        let rows = a.data.len() / w;
        let mut data = vec![0.0; a.data.len()];
        for r in 0..rows {
            let row = &a.data[r * w..(r + 1) * w];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::domain(
                    "l2-normalize-over-last-axis",
                    format!("zero vector at row {}", r),
                ));
            }
            for (j, &x) in row.iter().enumerate() {
                data[r * w + j] = x / norm;
            }
        }
        let ia = self.input_id(a, "l2-normalize-over-last-axis")?;
        self.record(Op::L2NormalizeLast(ia), a.shape.clone(), data, a.requires_grad, "l2-normalize-over-last-axis")
    }

    /// Multiply by a scalar constant (recorded through broadcast + multiply).
    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let k = self.constant_scalar(c);
        let b = self.broadcast_to(&k, &a.shape)?;
        self.mul(a, &b)
    }

    /// Add a scalar constant to every element.
    pub fn offset(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let k = self.constant_scalar(c);
        let b = self.broadcast_to(&k, &a.shape)?;
        self.add(a, &b)
    }

    /// Reverse-mode gradients of a scalar with respect to every
    /// `requires_grad` ancestor. Accumulation across fan-out is additive and
    /// runs in a fixed order, so repeating it on a rebuilt identical graph
    /// gives bit-identical results.
    pub fn backward(&self, scalar: &Tensor) -> Result<GradientMap> {
        let seed_id = match scalar.node_id {
            Some(id) if scalar.graph_id == self.id => id,
            _ => {
                return Err(Error::contract(
                    "backward: tensor is not attached to this graph",
                ))
            }
        };
        if scalar.data.len() != 1 || scalar.shape.len() > 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar, got shape {:?}",
                scalar.shape
            )));
        }

        let nodes = self.nodes.borrow();
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; seed_id + 1];
        adjoints[seed_id] = Some(vec![1.0]);
        let mut map = HashMap::new();

        for i in (0..=seed_id).rev() {
            let g = match adjoints[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            if node.value.requires_grad {
                let grad = Tensor {
                    shape: node.value.shape.clone(),
                    data: Rc::new(g.clone()),
                    requires_grad: false,
                    graph_id: 0,
                    node_id: None,
                };
                map.insert(i, grad);
            } else {
                continue;
            }

            let needs = |id: NodeId| nodes[id].value.requires_grad;
            let acc = |adjoints: &mut Vec<Option<Vec<f64>>>, id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
                let numel = nodes[id].value.data.len();
                let slot = adjoints[id].get_or_insert_with(|| vec![0.0; numel]);
                f(slot);
            };

            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if needs(*a) {
                        acc(&mut adjoints, *a, &mut |s| {
                            for (t, &v) in s.iter_mut().zip(&g) {
                                *t += v;
                            }
                        });
                    }
                    if needs(*b) {
                        acc(&mut adjoints, *b, &mut |s| {
                            for (t, &v) in s.iter_mut().zip(&g) {
                                *t += v;
                            }
                        });
                    }
                }
                Op::Subtract(a, b) => {
                    if needs(*a) {
                        acc(&mut adjoints, *a, &mut |s| {
                            for (t, &v) in s.iter_mut().zip(&g) {
                                *t += v;
                            }
                        });
                    }
                    if needs(*b) {
                        acc(&mut adjoints, *b, &mut |s| {
                            for (t, &v) in s.iter_mut().zip(&g) {
                                *t -= v;
                            }
                        });
                    }
                }
                Op::Multiply(a, b) => {
                    if needs(*a) {
                        let bd = Rc::clone(&nodes[*b].value.data);
                        acc(&mut adjoints, *a, &mut |s| {
                            for ((t, &v), &o) in s.iter_mut().zip(&g).zip(bd.iter()) {
                                *t += v * o;
                            }
                        });
                    }
                    if needs(*b) {
                        let ad = Rc::clone(&nodes[*a].value.data);
                        acc(&mut adjoints, *b, &mut |s| {
                            for ((t, &v), &o) in s.iter_mut().zip(&g).zip(ad.iter()) {
                                *t += v * o;
                            }
                        });
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[*a].value.shape[0], nodes[*a].value.shape[1]);
                    let n = nodes[*b].value.shape[1];
                    if needs(*a) {
                        let bd = Rc::clone(&nodes[*b].value.data);
                        acc(&mut adjoints, *a, &mut |s| {
                            // dA[i,p] += sum_j g[i,j] * B[p,j]
                            for i in 0..m {
                                for p in 0..k {
                                    let mut acc_v = 0.0;
                                    let grow = &g[i * n..(i + 1) * n];
                                    let brow = &bd[p * n..(p + 1) * n];
                                    for j in 0..n {
                                        acc_v += grow[j] * brow[j];
                                    }
                                    s[i * k + p] += acc_v;
                                }
                            }
                        });
                    }
                    if needs(*b) {
                        let ad = Rc::clone(&nodes[*a].value.data);
                        acc(&mut adjoints, *b, &mut |s| {
                            // dB[p,j] += sum_i A[i,p] * g[i,j]
                            for i in 0..m {
                                let grow = &g[i * n..(i + 1) * n];
                                for p in 0..k {
                                    let av = ad[i * k + p];
                                    if av == 0.0 {
                                        continue;
                                    }
                                    let srow = &mut s[p * n..(p + 1) * n];
                                    for j in 0..n {
                                        srow[j] += av * grow[j];
                                    }
                                }
                            }
                        });
                    }
                }
                Op::Relu(a) => {
                    if needs(*a) {
                        let ad = Rc::clone(&nodes[*a].value.data);
                        acc(&mut adjoints, *a, &mut |s| {
                            for ((t, &v), &x) in s.iter_mut().zip(&g).zip(ad.iter()) {
                                if x > 0.0 {
                                    *t += v;
                                }
                            }
                        });
                    }
                }
                Op::Tanh(a) => {
                    if needs(*a) {
                        let y = Rc::clone(&node.value.data);
                        acc(&mut adjoints, *a, &mut |s| {
                            for ((t, &v), &yv) in s.iter_mut().zip(&g).zip(y.iter()) {
                                *t += v * (1.0 - yv * yv);
                            }
                        });
                    }
                }
                Op::Exp(a) => {
                    if needs(*a) {
                        let y = Rc::clone(&node.value.data);
                        acc(&mut adjoints, *a, &mut |s| {
                            for ((t, &v), &yv) in s.iter_mut().zip(&g).zip(y.iter()) {
                                *t += v * yv;
                            }
                        });
                    }
                }
                Op::Log(a) => {
                    if needs(*a) {
                        let ad = Rc::clone(&nodes[*a].value.data);
                        acc(&mut adjoints, *a, &mut |s| {
                            for ((t, &v), &x) in s.iter_mut().zip(&g).zip(ad.iter()) {
                                *t += v / x;
                            }
                        });
                    }
                }
                Op::Sum(a) => {
                    if needs(*a) {
                        let gv = g[0];
                        acc(&mut adjoints, *a, &mut |s| {
                            for t in s.iter_mut() {
                                *t += gv;
                            }
                        });
                    }
                }
                Op::Mean(a) => {
                    if needs(*a) {
                        let n = nodes[*a].value.data.len() as f64;
                        let gv = g[0] / n;
                        acc(&mut adjoints, *a, &mut |s| {
                            for t in s.iter_mut() {
                                *t += gv;
                            }
                        });
                    }
                }
                Op::Square(a) => {
                    if needs(*a) {
                        let ad = Rc::clone(&nodes[*a].value.data);
                        acc(&mut adjoints, *a, &mut |s| {
                            for ((t, &v), &x) in s.iter_mut().zip(&g).zip(ad.iter()) {
                                *t += v * 2.0 * x;
                            }
                        });
                    }
                }
                Op::Concat(ids) => {
                    let ndim = node.value.shape.len();
                    let total_w = node.value.shape[ndim - 1];
                    let rows = node.value.data.len() / total_w;
                    let mut offset = 0;
                    for &cid in ids {
                        let w = nodes[cid].value.shape[nodes[cid].value.shape.len() - 1];
                        if needs(cid) {
                            let off = offset;
                            acc(&mut adjoints, cid, &mut |s| {
                                for r in 0..rows {
                                    for j in 0..w {
                                        s[r * w + j] += g[r * total_w + off + j];
                                    }
                                }
                            });
                        }
                        offset += w;
                    }
                }
                Op::Slice { input, start, len } => {
                    if needs(*input) {
                        let in_shape = &nodes[*input].value.shape;
                        let w = in_shape[in_shape.len() - 1];
                        let rows = nodes[*input].value.data.len() / w;
                        let (start, len) = (*start, *len);
                        acc(&mut adjoints, *input, &mut |s| {
                            for r in 0..rows {
                                for j in 0..len {
                                    s[r * w + start + j] += g[r * len + j];
                                }
                            }
                        });
                    }
                }
                Op::Broadcast { input } => {
                    if needs(*input) {
                        let m = nodes[*input].value.data.len();
                        let lead = node.value.data.len() / m;
                        acc(&mut adjoints, *input, &mut |s| {
                            for l in 0..lead {
                                for j in 0..m {
                                    s[j] += g[l * m + j];
                                }
                            }
                        });
                    }
                }
                Op::SoftmaxLast(a) => {
                    if needs(*a) {
                        let y = Rc::clone(&node.value.data);
                        let w = node.value.shape[node.value.shape.len() - 1];
                        let rows = y.len() / w;
                        acc(&mut adjoints, *a, &mut |s| {
                            for r in 0..rows {
                                let yr = &y[r * w..(r + 1) * w];
                                let gr = &g[r * w..(r + 1) * w];
                                let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                                for j in 0..w {
                                    s[r * w + j] += yr[j] * (gr[j] - dot);
                                }
                            }
                        });
                    }
                }
                Op::L2NormalizeLast(a) => {
                    if needs(*a) {
                        let x = Rc::clone(&nodes[*a].value.data);
                        let y = Rc::clone(&node.value.data);
                        let w = node.value.shape[node.value.shape.len() - 1];
                        let rows = y.len() / w;
                        acc(&mut adjoints, *a, &mut |s| {
                            for r in 0..rows {
                                let xr = &x[r * w..(r + 1) * w];
                                let yr = &y[r * w..(r + 1) * w];
                                let gr = &g[r * w..(r + 1) * w];
                                let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                                let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                                for j in 0..w {
                                    s[r * w + j] += (gr[j] - yr[j] * dot) / norm;
                                }
                            }
                        });
                    }
                }
            }
        }

        Ok(GradientMap { map })
    }
}

/// Relative error used by the finite-difference oracle:
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Checks reverse-mode gradients of `f` against central finite differences.
///
/// `f` is called with a fresh graph and leaf tensors lifted from `params`
/// (gradients enabled) and must return a scalar. Returns the maximum
/// relative error over every coordinate of every parameter.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Graph, &[Tensor]) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::contract("finite_difference_check: eps must be > 0"));
    }

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let lifted: Vec<Tensor> = ps.iter().map(|p| g.leaf(p, true)).collect();
        let out = f(&g, &lifted)?;
        out.item()
    };

    let graph = Graph::new();
    let lifted: Vec<Tensor> = params.iter().map(|p| graph.leaf(p, true)).collect();
    let out = f(&graph, &lifted)?;
    if out.len() != 1 {
        return Err(Error::contract(format!(
            "finite_difference_check: f returned shape {:?}, want scalar",
            out.shape()
        )));
    }
    let grads = graph.backward(&out)?;

    let mut max_err = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.grad_or_zeros(&lifted[pi]);
        for c in 0..p.len() {
            let x = p.data()[c];
            let mut plus: Vec<Tensor> = params.to_vec();
            plus[pi] = p.with_coordinate(c, x + eps)?;
            let fp = eval(&plus).map_err(|e| {
                Error::contract(format!(
                    "finite_difference_check failed at param {} coordinate {}: {}",
                    pi, c, e
                ))
            })?;
            let mut minus: Vec<Tensor> = params.to_vec();
            minus[pi] = p.with_coordinate(c, x - eps)?;
            let fm = eval(&minus).map_err(|e| {
                Error::contract(format!(
                    "finite_difference_check failed at param {} coordinate {}: {}",
                    pi, c, e
                ))
            })?;
            let numeric = (fp - fm) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::contract(format!(
                    "finite_difference_check: non-finite difference at param {} coordinate {}",
                    pi, c
                )));
            }
            max_err = max_err.max(relative_error(analytic.data()[c], numeric));
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let g = Graph::new();
        let out = g.add(&t1(&[1.0, 2.0]), &t1(&[3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let a = Tensor::new(vec![3, 3], (1..=9).map(|v| v as f64 * 0.3).collect()).unwrap();
        let out = g.matmul(&eye, &a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn softmax_uniform() {
        let g = Graph::new();
        let out = g.softmax_last(&t1(&[0.0, 0.0, 0.0])).unwrap();
        for &v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let g = Graph::new();
        for _ in 0..200 {
            let rows = rng.gen_range(1..5);
            let cols = rng.gen_range(1..7);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let x = Tensor::new(vec![rows, cols], data).unwrap();
            let y = g.softmax_last(&x).unwrap();
            for r in 0..rows {
                let s: f64 = y.data()[r * cols..(r + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "row sum {}", s);
            }
        }
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let g = Graph::new();
        for _ in 0..200 {
            let cols = rng.gen_range(1..7);
            let data: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.1..3.0)).collect();
            let x = Tensor::new(vec![cols], data).unwrap();
            let y = g.l2_normalize_last(&x).unwrap();
            let n: f64 = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_zero_vector_is_domain_error() {
        let g = Graph::new();
        let err = g.l2_normalize_last(&t1(&[0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Domain { .. }), "{err}");
    }

    #[test]
    fn log_rejects_non_positive() {
        let g = Graph::new();
        let err = g.log(&t1(&[1.0, -2.0])).unwrap_err();
        assert!(matches!(err, Error::Domain { .. }), "{err}");
    }

    #[test]
    fn shape_mismatch_names_operation() {
        let g = Graph::new();
        let err = g.add(&t1(&[1.0]), &t1(&[1.0, 2.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[1]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn backward_sum_of_squares() {
        let g = Graph::new();
        let x = g.leaf(&t1(&[1.0, 2.0, 3.0]), true);
        let y = g.sum(&g.square(&x).unwrap()).unwrap();
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_constant_only_graph_is_empty() {
        let g = Graph::new();
        let c = g.constant(&t1(&[1.0, 2.0]));
        let y = g.sum(&c).unwrap();
        let grads = g.backward(&y).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.leaf(&t1(&[1.0, 2.0]), true);
        let y = g.square(&x).unwrap();
        assert!(g.backward(&y).is_err());
    }

    #[test]
    fn backward_rejects_foreign_tensor() {
        let g1 = Graph::new();
        let g2 = Graph::new();
        let x = g1.leaf(&Tensor::scalar(1.0), true);
        assert!(g2.backward(&x).is_err());
        let y = g1.leaf(&t1(&[1.0, 2.0]), true);
        assert!(g2.add(&y, &y).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = finite_difference_check(
            |g, ps| {
                let prod = g.matmul(&ps[0], &ps[1])?;
                g.sum(&prod)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {}", err);
    }

    #[test]
    fn finite_difference_check_examples() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = Tensor::new(vec![3], (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = finite_difference_check(
            |g, ps| g.sum(&g.square(&ps[0])?),
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "sum-of-squares error {}", err);

        // constant function: both gradients vanish
        let err = finite_difference_check(
            |g, _| Ok(g.constant_scalar(4.0)),
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn relative_error_of_doubled_gradient() {
        // |2g - g| / max(|2g|, |g|, 1e-12) = 0.5 by the normalization above
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn backward_is_linear_in_the_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..20 {
            let x = Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let build = |g: &Graph, xs: &Tensor| -> (Tensor, Tensor) {
                let f = g.sum(&g.square(xs).unwrap()).unwrap();
                let gg = g.mean(&g.tanh(xs).unwrap()).unwrap();
                (f, gg)
            };

            let g1 = Graph::new();
            let x1 = g1.leaf(&x, true);
            let (f, h) = build(&g1, &x1);
            let combo = g1.add(&g1.scale(&f, a).unwrap(), &g1.scale(&h, b).unwrap()).unwrap();
            let gc = g1.backward(&combo).unwrap();
            let gf = g1.backward(&f).unwrap();
            let gh = g1.backward(&h).unwrap();

            let c = gc.get(&x1).unwrap().data();
            let fg = gf.get(&x1).unwrap().data();
            let hg = gh.get(&x1).unwrap().data();
            for i in 0..4 {
                let expect = a * fg[i] + b * hg[i];
                assert!(
                    (c[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0),
                    "linearity violated: {} vs {}",
                    c[i],
                    expect
                );
            }
        }
    }

    #[test]
    fn rebuilt_graph_gradients_are_bit_identical() {
        let run = || -> Vec<u64> {
            let g = Graph::new();
            let x = g.leaf(&t1(&[0.3, -0.7, 1.1, 0.05]), true);
            let w = g.leaf(
                &Tensor::new(vec![4, 2], vec![0.1, -0.2, 0.4, 0.3, -0.6, 0.9, 0.2, -0.1]).unwrap(),
                true,
            );
            let x2 = g.concat(&[&x]).unwrap();
            let row = Tensor::new(vec![1, 4], x2.data().to_vec()).unwrap();
            let row = g.leaf(&row, false);
            let h = g.tanh(&g.matmul(&row, &w).unwrap()).unwrap();
            let y = g.sum(&g.square(&h).unwrap()).unwrap();
            let grads = g.backward(&y).unwrap();
            grads
                .get(&w)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn broadcast_requires_suffix_shape() {
        let g = Graph::new();
        let x = t1(&[1.0, 2.0]);
        assert!(g.broadcast_to(&x, &[3, 2]).is_ok());
        assert!(g.broadcast_to(&x, &[2, 3]).is_err());
        let s = Tensor::scalar(5.0);
        let b = g.broadcast_to(&s, &[2, 2]).unwrap();
        assert_eq!(b.data(), &[5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let g = Graph::new();
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = g.concat(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice_last(&c, 2, 1).unwrap();
        assert_eq!(s.data(), &[5.0, 6.0]);
    }

    /// Every operation kind passes a finite-difference check on random
    /// small inputs.
    #[test]
    fn every_op_kind_passes_gradient_check() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let kinds: Vec<OpKind> = vec![
            OpKind::Add,
            OpKind::Subtract,
            OpKind::Multiply,
            OpKind::MatMul,
            OpKind::Relu,
            OpKind::Tanh,
            OpKind::Exp,
            OpKind::Log,
            OpKind::Sum,
            OpKind::Mean,
            OpKind::Square,
            OpKind::Concat,
            OpKind::Slice { start: 0, len: 1 },
            OpKind::Broadcast { shape: vec![] },
            OpKind::SoftmaxLastAxis,
            OpKind::L2NormalizeLastAxis,
        ];

        for kind in &kinds {
            for case in 0..100 {
                let rows = rng.gen_range(1..=3usize);
                let cols = rng.gen_range(1..=6usize);
                let draw = |rng: &mut ChaCha20Rng, n: usize, positive: bool| -> Vec<f64> {
                    (0..n)
                        .map(|_| {
                            if positive {
                                rng.gen_range(0.2..2.0)
                            } else {
                                // keep clear of the relu kink
                                let mut v: f64 = rng.gen_range(-1.0..1.0);
                                if v.abs() < 5e-3 {
                                    v += 0.01_f64.copysign(v + 1e-12);
                                }
                                v
                            }
                        })
                        .collect()
                };

                let positive = matches!(kind, OpKind::Log);
                let (inputs, op): (Vec<Tensor>, OpKind) = match kind {
                    OpKind::Add | OpKind::Subtract | OpKind::Multiply => (
                        vec![
                            Tensor::new(vec![rows, cols], draw(&mut rng, rows * cols, false)).unwrap(),
                            Tensor::new(vec![rows, cols], draw(&mut rng, rows * cols, false)).unwrap(),
                        ],
                        kind.clone(),
                    ),
                    OpKind::MatMul => {
                        let k = rng.gen_range(1..=4usize);
                        (
                            vec![
                                Tensor::new(vec![rows, k], draw(&mut rng, rows * k, false)).unwrap(),
                                Tensor::new(vec![k, cols], draw(&mut rng, k * cols, false)).unwrap(),
                            ],
                            kind.clone(),
                        )
                    }
                    OpKind::Concat => (
                        vec![
                            Tensor::new(vec![rows, cols], draw(&mut rng, rows * cols, false)).unwrap(),
                            Tensor::new(vec![rows, 2], draw(&mut rng, rows * 2, false)).unwrap(),
                        ],
                        kind.clone(),
                    ),
                    OpKind::Slice { .. } => {
                        let start = rng.gen_range(0..cols);
                        let len = rng.gen_range(1..=cols - start);
                        (
                            vec![Tensor::new(vec![rows, cols], draw(&mut rng, rows * cols, false)).unwrap()],
                            OpKind::Slice { start, len },
                        )
                    }
                    OpKind::Broadcast { .. } => (
                        vec![Tensor::new(vec![cols], draw(&mut rng, cols, false)).unwrap()],
                        OpKind::Broadcast { shape: vec![rows, cols] },
                    ),
                    OpKind::L2NormalizeLastAxis => {
                        // keep rows away from the origin so the check is stable
                        let mut data = draw(&mut rng, rows * cols, false);
                        for r in 0..rows {
                            let row = &mut data[r * cols..(r + 1) * cols];
                            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                            if n < 0.3 {
                                row[0] += 0.5;
                            }
                        }
                        (
                            vec![Tensor::new(vec![rows, cols], data).unwrap()],
                            kind.clone(),
                        )
                    }
                    _ => (
                        vec![Tensor::new(vec![rows, cols], draw(&mut rng, rows * cols, positive)).unwrap()],
                        kind.clone(),
                    ),
                };

                // project the op output to a scalar with a fixed random functional
                let out_probe: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let err = finite_difference_check(
                    |g, ps| {
                        let refs: Vec<&Tensor> = ps.iter().collect();
                        let out = g.forward_op(&op, &refs)?;
                        let probe =
                            Tensor::new(out.shape().to_vec(), out_probe[..out.len()].to_vec())?;
                        let probe = g.constant(&probe);
                        g.sum(&g.mul(&out, &probe)?)
                    },
                    &inputs,
                    1e-5,
                )
                .unwrap_or_else(|e| panic!("{} case {}: {}", op.name(), case, e));
                assert!(
                    err < 1e-4,
                    "{} case {}: finite-difference error {}",
                    op.name(),
                    case,
                    err
                );
            }
        }
    }
}
