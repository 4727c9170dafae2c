//! Reverse-mode differentiation over [`Tensor2D`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Tape::backward`] on a 1x1 node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node that depends on a
//! parameter. Nodes built only from constant inputs carry no gradient.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor2D};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm(Var, f64),
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    RowNormalize(Var, f64),
    RowMax(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>),
    BceWithLogits(Var, Tensor2D),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Sum(_) => "sum",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Gather(..) => "gather",
            Op::RowNormalize(..) => "row_normalize",
            Op::RowMax(..) => "row_max",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::BceWithLogits(..) => "bce_with_logits",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Softmax(a)
            | Op::LayerNorm(a, _)
            | Op::Sum(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Gather(a, _)
            | Op::RowNormalize(a, _)
            | Op::RowMax(a, _)
            | Op::CrossEntropy(a, _)
            | Op::BceWithLogits(a, _) => vec![*a],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor2D,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that rejects non-finite intermediates.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            checked: true,
        }
    }

    pub fn unchecked() -> Self {
        Self {
            checked: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Names of the trainable parameters recorded so far, sorted.
    pub fn param_list(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        let requires_grad =
            matches!(op, Op::Param) || op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    /// Records a constant input (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor2D) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(id)
    }

    /// Records a trainable parameter. Repeated requests for the same name
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Param)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Records a parameter value as a constant, cutting gradient flow.
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        Ok(self.constant(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ak) = self.shape(a);
        let (bk, bc) = self.shape(b);
        if ak != bk {
            return Err(Error::shape("matmul", format!("({ar},{ak}) x ({bk},{bc})")));
        }
        let mut out = vec![0.0; ar * bc];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, ar, ak, bc);
        self.push(Tensor2D::from_raw(ar, bc, out), Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ak) = self.shape(a);
        let (br, bk) = self.shape(b);
        if ak != bk {
            return Err(Error::shape("matmul_bt", format!("({ar},{ak}) x ({br},{bk})^T")));
        }
        let mut out = vec![0.0; ar * br];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, ar, ak, br);
        self.push(Tensor2D::from_raw(ar, br, out), Op::MatMulBt(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor2D {
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor2D::from_raw(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    fn broadcast_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (_, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::shape(
                op,
                format!("row {:?} against {:?}", self.shape(row), self.shape(a)),
            ));
        }
        Ok(())
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_row("add_row", a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a 1×c row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_row("mul_row", a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise normalization to zero mean and unit (population) variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let (mean, inv) = moments(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(out, Op::LayerNorm(a, eps))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor2D::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&v| self.shape(v).1)
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::shape("concat_rows", format!("{c} cols vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor2D::from_raw(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&v| self.shape(v).0)
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Tensor2D::from_raw(rows, cols, data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {r}")));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor2D::from_raw(len, c, data), Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        self.push(Tensor2D::from_raw(r, len, data), Op::SliceCols(a, start))
    }

    /// Selects rows of `a` by index (embedding lookup).
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather", format!("index {bad} >= {r}")));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(src.row(i));
        }
        self.push(
            Tensor2D::from_raw(indices.len(), c, data),
            Op::Gather(a, indices.to_vec()),
        )
    }

    /// Divides each row by `max(‖row‖₂, floor)`.
    pub fn row_normalize(&mut self, a: Var, floor: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let denom = l2(row).max(floor);
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        self.push(out, Op::RowNormalize(a, floor))
    }

    /// Per-row maximum as an r×1 column. The gradient flows to the argmax
    /// entry only; ties go to the lowest column index.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.shape();
        if c == 0 {
            return Err(Error::shape("row_max", "zero columns"));
        }
        let mut argmax = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            let (j, v) = first_argmax(src.row(i));
            argmax.push(j);
            data.push(v);
        }
        self.push(Tensor2D::from_raw(r, 1, data), Op::RowMax(a, argmax))
    }

    /// Argmax columns recorded by a [`Tape::row_max`] node.
    pub fn argmax_of(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::RowMax(_, idx) => Some(idx),
            _ => None,
        }
    }

    /// Mean over rows of `logsumexp(row) − row[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let src = self.value(logits);
        let (r, c) = src.shape();
        if targets.len() != r || r == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy", format!("target {bad} >= {c}")));
        }
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| log_sum_exp(src.row(i)) - src.get(i, t))
            .sum();
        self.push(
            Tensor2D::scalar(total / r as f64),
            Op::CrossEntropy(logits, targets.to_vec()),
        )
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor2D) -> Result<Var> {
        if self.shape(logits) != targets.shape() || targets.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", self.shape(logits), targets.shape()),
            ));
        }
        let z = self.value(logits).data();
        let total: f64 = z
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let n = targets.len() as f64;
        self.push(
            Tensor2D::scalar(total / n),
            Op::BceWithLogits(logits, targets),
        )
    }

    /// Reverse pass from the 1×1 node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("root must be 1x1, got {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Tensor2D>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor2D::scalar(1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ar, ak) = self.shape(*a);
                let bc = self.shape(*b).1;
                if self.wants(*a) {
                    let mut ga = vec![0.0; ar * ak];
                    matmul_bt_into(g.data(), self.value(*b).data(), &mut ga, ar, bc, ak);
                    self.accumulate(grads, *a, Tensor2D::from_raw(ar, ak, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; ak * bc];
                    matmul_at_into(self.value(*a).data(), g.data(), &mut gb, ar, ak, bc);
                    self.accumulate(grads, *b, Tensor2D::from_raw(ak, bc, gb));
                }
            }
            Op::MatMulBt(a, b) => {
                let (ar, k) = self.shape(*a);
                let br = self.shape(*b).0;
                if self.wants(*a) {
                    let mut ga = vec![0.0; ar * k];
                    matmul_into(g.data(), self.value(*b).data(), &mut ga, ar, br, k);
                    self.accumulate(grads, *a, Tensor2D::from_raw(ar, k, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; br * k];
                    matmul_at_into(g.data(), self.value(*a).data(), &mut gb, ar, br, k);
                    self.accumulate(grads, *b, Tensor2D::from_raw(br, k, gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip(g, bv, |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip(g, av, |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (x, s) in ga.row_mut(i).iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*row) {
                    let prod = zip(g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *row, column_sums(&prod));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|v| v * k)),
            Op::Gelu(a) => {
                let ga = zip(g, self.value(*a), |gv, x| {
                    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = zip(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = zip(g, self.value(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let yr = y.row(i);
                    let dot: f64 = g.row(i).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gx, &yv) in ga.row_mut(i).iter_mut().zip(yr) {
                        *gx = yv * (*gx - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                let d = x.cols() as f64;
                for i in 0..ga.rows() {
                    let (_, inv) = moments(x.row(i), *eps);
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let mean_g = gr.iter().sum::<f64>() / d;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d;
                    for ((o, &gv), &yv) in ga.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor2D::filled(r, c, g.item()));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    if self.wants(*p) {
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        self.accumulate(grads, *p, Tensor2D::from_raw(r, c, slice));
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(r * c);
                        for i in 0..r {
                            data.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        self.accumulate(grads, *p, Tensor2D::from_raw(r, c, data));
                    }
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor2D::zeros(r, c);
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor2D::zeros(r, c);
                let w = g.cols();
                for i in 0..r {
                    ga.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gather(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor2D::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowNormalize(a, floor) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let norm = l2(x.row(i));
                    let gr = g.row(i);
                    if norm > *floor {
                        let yr = y.row(i);
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &yv) in ga.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *o = (gv - yv * dot) / norm;
                        }
                    } else {
                        for o in ga.row_mut(i).iter_mut() {
                            *o /= floor;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowMax(a, argmax) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor2D::zeros(r, c);
                for (i, &j) in argmax.iter().enumerate() {
                    ga.set(i, j, g.get(i, 0));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::CrossEntropy(a, targets) => {
                let mut ga = self.value(*a).clone();
                let scale = g.item() / targets.len() as f64;
                for (i, &t) in targets.iter().enumerate() {
                    let row = ga.row_mut(i);
                    softmax_in_place(row);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::BceWithLogits(a, targets) => {
                let scale = g.item() / targets.len() as f64;
                let ga = zip(self.value(*a), targets, |z, t| (sigmoid(z) - t) * scale);
                self.accumulate(grads, *a, ga);
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor2D>], v: Var, g: Tensor2D) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn param_names(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the root through a parameter.
    pub fn get(&self, v: Var) -> Option<&Tensor2D> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for (name, &v) in tape.param_names() {
            if let Some(g) = self.get(v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Parameter gradients keyed by name.
    pub fn by_param(&self, tape: &Tape) -> BTreeMap<String, Tensor2D> {
        tape.param_names()
            .filter_map(|(name, &v)| self.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

fn zip(a: &Tensor2D, b: &Tensor2D, f: impl Fn(f64, f64) -> f64) -> Tensor2D {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor2D::from_raw(a.rows(), a.cols(), data)
}

fn column_sums(g: &Tensor2D) -> Tensor2D {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Tensor2D::from_raw(1, g.cols(), out)
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn l2(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn first_argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
