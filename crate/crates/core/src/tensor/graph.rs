//! Dynamically built computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; backward walks it in reverse exactly once. Forward
//! values are computed eagerly when a node is added and cached for the
//! backward pass.

use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, op_dims};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input {
        name: String,
    },
    Param(ParamId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        a: NodeId,
        start: usize,
    },
    GatherRows {
        a: NodeId,
        idx: Vec<usize>,
    },
    LayerNormRows(NodeId),
    BatchNormCols(NodeId),
    NormalLogSf(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::LogSumExpRows(_) => "logsumexp",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::LayerNormRows(_) => "layer_norm",
            Op::BatchNormCols(_) => "batch_norm",
            Op::NormalLogSf(_) => "normal_log_sf",
        }
    }
}

struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    needs_grad: bool,
}

pub const NORM_EPS: f64 = 1e-5;

/// A single forward/backward pass.
///
/// Parameter values are borrowed from a [`ParamStore`]; everything else is
/// owned by the graph.
pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    /// Graph without parameters (pure functions of inputs).
    pub fn detached() -> Graph<'static> {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.expect("parameter graph").get(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Option<Tensor>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        let shape = self.value(id).shape().to_vec();
        match &node.op {
            Op::Input { name } => format!("input `{name}` {shape:?}"),
            Op::Param(p) => format!(
                "param `{}` {shape:?}",
                self.store.map(|s| s.name(*p)).unwrap_or("?")
            ),
            other => format!("node {} ({}) {shape:?}", id.0, other.name()),
        }
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    fn unary(&mut self, a: NodeId, op: Op, value: Tensor) -> NodeId {
        let g = self.grad_of(&[a]);
        self.push(op, Some(value), g)
    }

    // ---- leaves ----

    /// Constant input (no gradient).
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(Op::Input { name: name.into() }, Some(value), false)
    }

    /// Input whose gradient is wanted (integrated gradients, finite-difference checks).
    pub fn input_with_grad(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(Op::Input { name: name.into() }, Some(value), true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.input("const", value)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes.get(&id) {
            return *n;
        }
        assert!(self.store.is_some(), "parameter used on a detached graph");
        let n = self.push(Op::Param(id), None, true);
        self.param_nodes.insert(id, n);
        n
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        let (m, k) = op_dims(self.value(a), ta);
        let (k2, n) = op_dims(self.value(b), tb);
        if k != k2 {
            return Err(self.shape_err(
                "matmul",
                format!(
                    "inner dimensions differ: {} vs {}",
                    self.describe(a),
                    self.describe(b)
                ),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(self.value(a), ta, self.value(b), tb, 0.0, &mut out);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, Some(out), g))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(op, format!("{} vs {}", self.describe(a), self.describe(b))));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.same_shape(op_name, a, b)?;
        let v = self.value(a).zip_map(self.value(b), f);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(op, Some(v), g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast_check(&self, op: &'static str, a: NodeId, row: NodeId) -> Result<()> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(self.shape_err(
                op,
                format!(
                    "row operand must be 1 x {}: {} with {}",
                    av.cols(),
                    self.describe(a),
                    self.describe(row)
                ),
            ));
        }
        Ok(())
    }

    /// `a + row` with `row` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast_check("add_row", a, row)?;
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        let mut out = av.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += rv.data()[i % c];
        }
        let g = self.grad_of(&[a, row]);
        Ok(self.push(Op::AddRow(a, row), Some(out), g))
    }

    /// `a ⊙ row` with `row` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast_check("mul_row", a, row)?;
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        let mut out = av.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= rv.data()[i % c];
        }
        let g = self.grad_of(&[a, row]);
        Ok(self.push(Op::MulRow(a, row), Some(out), g))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.unary(a, Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        self.unary(a, Op::AddScalar(a), v)
    }

    // ---- elementwise nonlinearities ----

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.unary(a, Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.unary(a, Op::Tanh(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.unary(a, Op::Softplus(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.unary(a, Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.unary(a, Op::Log(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.unary(a, Op::Square(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.unary(a, Op::Sqrt(a), v)
    }

    /// `ln(1 − Φ(z))` elementwise, Φ the standard normal CDF.
    pub fn normal_log_sf(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(normal_log_sf);
        self.unary(a, Op::NormalLogSf(a), v)
    }

    // ---- row-wise reductions ----

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = row_apply(self.value(a), softmax_in_place);
        self.unary(a, Op::SoftmaxRows(a), v)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = row_apply(self.value(a), |r| {
            let lse = logsumexp(r);
            r.iter_mut().for_each(|x| *x -= lse);
        });
        self.unary(a, Op::LogSoftmaxRows(a), v)
    }

    /// `n × m → n × 1` log-sum-exp of each row.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data: Vec<f64> = (0..av.rows()).map(|r| logsumexp(av.row_slice(r))).collect();
        let v = Tensor::matrix(av.rows(), 1, data).expect("shape");
        self.unary(a, Op::LogSumExpRows(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, Op::SumAll(a), v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = Tensor::scalar(av.sum() / av.len().max(1) as f64);
        self.unary(a, Op::MeanAll(a), v)
    }

    /// `n × m → n × 1` row sums.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data: Vec<f64> = (0..av.rows())
            .map(|r| av.row_slice(r).iter().sum())
            .collect();
        let v = Tensor::matrix(av.rows(), 1, data).expect("shape");
        self.unary(a, Op::SumRows(a), v)
    }

    // ---- structural ----

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.shape_err(
                    "concat_cols",
                    format!("row count {} vs {}", rows, self.describe(p)),
                ));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let v = Tensor::matrix(rows, total, data).expect("shape");
        let g = self.grad_of(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Some(v), g))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(self.shape_err(
                "slice_cols",
                format!(
                    "columns {start}..{end} out of range for {}",
                    self.describe(a)
                ),
            ));
        }
        let mut data = Vec::with_capacity(av.rows() * (end - start));
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row_slice(r)[start..end]);
        }
        let v = Tensor::matrix(av.rows(), end - start, data).expect("shape");
        Ok(self.unary(a, Op::SliceCols { a, start }, v))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(self.shape_err(
                "gather_rows",
                format!("row {bad} out of range for {}", self.describe(a)),
            ));
        }
        let v = av.select_rows(idx);
        Ok(self.unary(
            a,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            v,
        ))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let v = row_apply(self.value(a), |r| {
            let (mean, inv) = moments(r.iter().copied());
            r.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        });
        self.unary(a, Op::LayerNormRows(a), v)
    }

    /// Per-column standardization over the batch (no affine part).
    pub fn batch_norm_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        let mut out = av.clone();
        for j in 0..c {
            let (mean, inv) = moments((0..n).map(|i| av.data()[i * c + j]));
            for i in 0..n {
                let x = &mut out.data_mut()[i * c + j];
                *x = (*x - mean) * inv;
            }
        }
        self.unary(a, Op::BatchNormCols(a), out)
    }

    // ---- backward ----

    /// Reverse pass from `output`, seeded with `output_gradient`.
    pub fn backward(&self, output: NodeId, output_gradient: &Tensor) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "backward from node {} but the graph holds {} nodes; run the forward pass first",
                output.0,
                self.nodes.len()
            )));
        }
        if self.value(output).shape() != output_gradient.shape() {
            return Err(Error::Shape {
                node: output.0,
                op: "backward",
                detail: format!(
                    "seed gradient {:?} for {}",
                    output_gradient.shape(),
                    self.describe(output)
                ),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(output_gradient.clone());
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dout, &mut grads);
            grads[i] = Some(dout);
        }
        Ok(Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        })
    }

    /// Backward from a `1 × 1` output with seed 1.
    pub fn backward_scalar(&self, output: NodeId) -> Result<Gradients> {
        self.backward(output, &Tensor::scalar(1.0))
    }

    fn backprop_node(&self, i: usize, dout: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = self.nodes[i].value.as_ref();
        let needs = |n: NodeId| self.nodes[n.0].needs_grad;
        let mut acc = |n: NodeId, g: Tensor| {
            if !self.nodes[n.0].needs_grad {
                return;
            }
            match &mut grads[n.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &self.nodes[i].op {
            Op::Input { .. } | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let mut ga = Tensor::zeros(av.shape());
                    if *ta {
                        // dA = op(B) · dCᵀ
                        gemm(bv, *tb, dout, true, 0.0, &mut ga);
                    } else {
                        // dA = dC · op(B)ᵀ
                        gemm(dout, false, bv, !*tb, 0.0, &mut ga);
                    }
                    acc(*a, ga);
                }
                if needs(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    if *tb {
                        // dB = dCᵀ · op(A)
                        gemm(dout, true, av, *ta, 0.0, &mut gb);
                    } else {
                        // dB = op(A)ᵀ · dC
                        gemm(av, !*ta, dout, false, 0.0, &mut gb);
                    }
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, dout.clone());
                acc(*b, dout.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dout.clone());
                acc(*b, dout.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    acc(*a, dout.zip_map(bv, |g, y| g * y));
                }
                if needs(*b) {
                    acc(*b, dout.zip_map(av, |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    acc(*a, dout.zip_map(bv, |g, y| g / y));
                }
                if needs(*b) {
                    let t = av.zip_map(bv, |x, y| -x / (y * y));
                    acc(*b, dout.zip_map(&t, |g, t| g * t));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, dout.clone());
                if needs(*row) {
                    acc(*row, col_sums(dout));
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let c = av.cols();
                if needs(*a) {
                    let mut g = dout.clone();
                    for (k, v) in g.data_mut().iter_mut().enumerate() {
                        *v *= rv.data()[k % c];
                    }
                    acc(*a, g);
                }
                if needs(*row) {
                    acc(*row, col_sums(&dout.zip_map(av, |g, x| g * x)));
                }
            }
            Op::Scale(a, s) => acc(*a, dout.map(|g| g * s)),
            Op::AddScalar(a) => acc(*a, dout.clone()),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, dout.zip_map(av, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                acc(*a, dout.zip_map(y.unwrap(), |g, s| g * s * (1.0 - s)));
            }
            Op::Tanh(a) => acc(*a, dout.zip_map(y.unwrap(), |g, t| g * (1.0 - t * t))),
            Op::Softplus(a) => {
                acc(*a, dout.zip_map(self.value(*a), |g, x| g * sigmoid(x)));
            }
            Op::Exp(a) => acc(*a, dout.zip_map(y.unwrap(), |g, e| g * e)),
            Op::Log(a) => acc(*a, dout.zip_map(self.value(*a), |g, x| g / x)),
            Op::Square(a) => acc(*a, dout.zip_map(self.value(*a), |g, x| 2.0 * g * x)),
            Op::Sqrt(a) => acc(*a, dout.zip_map(y.unwrap(), |g, s| g / (2.0 * s))),
            Op::NormalLogSf(a) => {
                acc(
                    *a,
                    dout.zip_map(self.value(*a), |g, z| g * normal_log_sf_grad(z)),
                );
            }
            Op::SoftmaxRows(a) => {
                let yv = y.unwrap();
                let c = yv.cols();
                let mut g = dout.clone();
                for r in 0..yv.rows() {
                    let yr = yv.row_slice(r);
                    let gr = &mut g.data_mut()[r * c..(r + 1) * c];
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                acc(*a, g);
            }
            Op::LogSoftmaxRows(a) => {
                let yv = y.unwrap();
                let c = yv.cols();
                let mut g = dout.clone();
                for r in 0..yv.rows() {
                    let yr = yv.row_slice(r);
                    let gr = &mut g.data_mut()[r * c..(r + 1) * c];
                    let total: f64 = gr.iter().sum();
                    for (gv, ly) in gr.iter_mut().zip(yr) {
                        *gv -= ly.exp() * total;
                    }
                }
                acc(*a, g);
            }
            Op::LogSumExpRows(a) => {
                let av = self.value(*a);
                let yv = y.unwrap();
                let c = av.cols();
                let mut g = av.clone();
                for r in 0..av.rows() {
                    let lse = yv.data()[r];
                    let d = dout.data()[r];
                    for v in &mut g.data_mut()[r * c..(r + 1) * c] {
                        *v = d * (*v - lse).exp();
                    }
                }
                acc(*a, g);
            }
            Op::SumAll(a) => {
                let d = dout.data()[0];
                acc(*a, Tensor::full(self.value(*a).shape(), d));
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let d = dout.data()[0] / av.len().max(1) as f64;
                acc(*a, Tensor::full(av.shape(), d));
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut g = Tensor::zeros(av.shape());
                for (k, v) in g.data_mut().iter_mut().enumerate() {
                    *v = dout.data()[k / c];
                }
                acc(*a, g);
            }
            Op::ConcatCols(parts) => {
                let rows = dout.rows();
                let total = dout.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if needs(p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(
                                &dout.data()[r * total + offset..r * total + offset + c],
                            );
                        }
                        acc(
                            p,
                            Tensor::new(self.value(p).shape().to_vec(), data).unwrap(),
                        );
                    }
                    offset += c;
                }
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                let c = av.cols();
                let w = dout.cols();
                let mut g = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    g.data_mut()[r * c + start..r * c + start + w]
                        .copy_from_slice(dout.row_slice(r));
                }
                acc(*a, g);
            }
            Op::GatherRows { a, idx } => {
                let av = self.value(*a);
                let c = av.cols();
                let mut g = Tensor::zeros(av.shape());
                for (k, &src) in idx.iter().enumerate() {
                    for (t, v) in g.data_mut()[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(dout.row_slice(k))
                    {
                        *t += v;
                    }
                }
                acc(*a, g);
            }
            Op::LayerNormRows(a) => {
                let av = self.value(*a);
                let yv = y.unwrap();
                let c = av.cols();
                let mut g = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let (_, inv) = moments(av.row_slice(r).iter().copied());
                    let idx: Vec<usize> = (r * c..(r + 1) * c).collect();
                    norm_backward(&idx, yv, dout, inv, &mut g);
                }
                acc(*a, g);
            }
            Op::BatchNormCols(a) => {
                let av = self.value(*a);
                let yv = y.unwrap();
                let (n, c) = (av.rows(), av.cols());
                let mut g = Tensor::zeros(av.shape());
                for j in 0..c {
                    let (_, inv) = moments((0..n).map(|i| av.data()[i * c + j]));
                    let idx: Vec<usize> = (0..n).map(|i| i * c + j).collect();
                    norm_backward(&idx, yv, dout, inv, &mut g);
                }
                acc(*a, g);
            }
        }
    }
}

/// Gradient of standardization `y = (x − mean)·inv` over the index group.
fn norm_backward(idx: &[usize], y: &Tensor, dout: &Tensor, inv: f64, g: &mut Tensor) {
    let n = idx.len() as f64;
    let mean_g: f64 = idx.iter().map(|&k| dout.data()[k]).sum::<f64>() / n;
    let mean_gy: f64 = idx
        .iter()
        .map(|&k| dout.data()[k] * y.data()[k])
        .sum::<f64>()
        / n;
    for &k in idx {
        g.data_mut()[k] = inv * (dout.data()[k] - mean_g - y.data()[k] * mean_gy);
    }
}

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

fn col_sums(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for (k, v) in t.data().iter().enumerate() {
        out[k % c] += v;
    }
    Tensor::row(&out)
}

fn row_apply(t: &Tensor, f: impl Fn(&mut [f64])) -> Tensor {
    let mut out = t.clone();
    let c = t.cols();
    if c > 0 {
        for chunk in out.data_mut().chunks_mut(c) {
            f(chunk);
        }
    }
    out
}

/// Gradients from one backward pass, indexed by node and by parameter.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_nodes.get(&id).and_then(|n| self.node(*n))
    }

    /// Parameter gradients keyed by parameter id.
    pub fn into_param_grads(mut self) -> ParamGrads {
        let mut out = BTreeMap::new();
        for (&pid, &node) in &self.param_nodes {
            if let Some(g) = self.grads.get_mut(node.0).and_then(Option::take) {
                out.insert(pid, g);
            }
        }
        ParamGrads(out)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamGrads(pub BTreeMap<ParamId, Tensor>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(&id)
    }
}

// ---- scalar helpers shared across the crate ----

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn logsumexp(r: &[f64]) -> f64 {
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(r: &mut [f64]) {
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in r.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in r.iter_mut() {
        *x /= total;
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// `ln(1 − Φ(z))`, accurate far into the upper tail.
pub fn normal_log_sf(z: f64) -> f64 {
    if z < 30.0 {
        (0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)).ln()
    } else {
        let z2 = z * z;
        -0.5 * z2 - z.ln() - LN_SQRT_2PI + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    }
}

/// `d/dz ln(1 − Φ(z)) = −φ(z) / (1 − Φ(z))`.
pub fn normal_log_sf_grad(z: f64) -> f64 {
    let log_pdf = -0.5 * z * z - LN_SQRT_2PI;
    -(log_pdf - normal_log_sf(z)).exp()
}

pub fn normal_log_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}
