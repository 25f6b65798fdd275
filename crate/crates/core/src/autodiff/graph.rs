use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var, usize),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    Select(Var, usize),
    LogSumExp(Var),
    CrossEntropy(Var, Vec<usize>),
    L2NormalizeRows(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in creation order, which is always a valid
/// topological order, so `backward` is a single reverse sweep. A fresh graph
/// is built for every training step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.values().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericInput(format!(
            "{what} received a NaN or infinite value"
        )))
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Drops every node created at or after `mark`; handles past that point
    /// become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.params.retain(|(_, v)| v.0 < mark);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value.without_grad(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf bound to a named parameter. Its gradient can be
    /// copied back with [`super::ParameterStore::accumulate_grads`].
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        let v = self.leaf(value.clone(), true);
        self.params.push((name.to_string(), v));
        v
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.without_grad();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.req(v)
    }

    pub(crate) fn param_bindings(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (av, bv) = (ta.values(), tb.values());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x != 0.0 {
                    let brow = &bv[p * n..(p + 1) * n];
                    orow.iter_mut().zip(brow).for_each(|(o, b)| *o += x * b);
                }
            }
        }
        let r = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), r))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let v = t.values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let req = self.req(a);
        self.push(
            Tensor::new(&[c, r], out).expect("transpose shape"),
            Op::Transpose(a),
            req,
        )
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{name} needs equal shapes: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        Ok((ta.shape().to_vec(), self.req(a) || self.req(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, r) = self.elementwise(a, b, "add")?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), r))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, r) = self.elementwise(a, b, "sub")?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Sub(a, b), r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, r) = self.elementwise(a, b, "mul")?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), r))
    }

    /// Adds a length-`n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tb.len() != n {
            return Err(Error::Shape(format!(
                "add_row: row of shape {:?} does not fit {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let bv = tb.values();
        let out = ta
            .values()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % n])
            .collect();
        let shape = ta.shape().to_vec();
        let r = self.req(a) || self.req(row);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddRow(a, row), r))
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(Error::Shape(format!(
                "mul_scalar expects a one-element factor, got {:?}",
                ts.shape()
            )));
        }
        let f = ts.item();
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let out = tx.values().iter().map(|v| v * f).collect();
        let r = self.req(x) || self.req(s);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MulScalar(x, s), r))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let out = tx.values().iter().map(|v| v * c).collect();
        let r = self.req(x);
        self.push(
            Tensor::new(&shape, out).expect("scale shape"),
            Op::Scale(x, c),
            r,
        )
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let out = tx.values().iter().map(|&v| f(v)).collect();
        let r = self.req(x);
        self.push(Tensor::new(&shape, out).expect("unary shape"), op, r)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        check_finite(tx, "softmax")?;
        if tx.is_empty() {
            return Err(Error::Shape("softmax of an empty tensor".into()));
        }
        let c = tx.cols();
        let mut out = tx.values().to_vec();
        out.chunks_mut(c).for_each(softmax_in_place);
        let shape = tx.shape().to_vec();
        let r = self.req(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(x), r))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        check_finite(tx, "log_softmax")?;
        if tx.is_empty() {
            return Err(Error::Shape("log_softmax of an empty tensor".into()));
        }
        let c = tx.cols();
        let mut out = tx.values().to_vec();
        for row in out.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = tx.shape().to_vec();
        let r = self.req(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax(x), r))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        let r = self.req(x);
        self.push(Tensor::scalar(s), Op::Sum(x), r)
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let ndim = tx.shape().len();
        if axis >= ndim.max(1) || tx.is_empty() {
            return Err(Error::Shape(format!(
                "mean over axis {axis} of shape {:?}",
                tx.shape()
            )));
        }
        let (m, n) = (tx.rows(), tx.cols());
        let v = tx.values();
        let (out, shape) = if ndim <= 1 {
            (vec![v.iter().sum::<f64>() / v.len() as f64], vec![])
        } else if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                out.iter_mut()
                    .zip(&v[i * n..(i + 1) * n])
                    .for_each(|(o, x)| *o += x);
            }
            out.iter_mut().for_each(|o| *o /= m as f64);
            (out, vec![n])
        } else {
            let out = (0..m)
                .map(|i| v[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
                .collect();
            (out, vec![m])
        };
        let r = self.req(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mean(x, axis), r))
    }

    /// Concatenates matrices along rows (`axis == 0`) or columns (`axis == 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::Shape(format!("concat axis {axis} out of range")));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| (self.value(p).rows(), self.value(p).cols()))
            .collect();
        let (rows, cols, out) = if axis == 0 {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return Err(Error::Shape(format!(
                    "concat along rows needs equal column counts: {dims:?}"
                )));
            }
            let mut out = Vec::with_capacity(dims.iter().map(|d| d.0 * cols).sum());
            for &p in parts {
                out.extend_from_slice(self.value(p).values());
            }
            (dims.iter().map(|d| d.0).sum(), cols, out)
        } else {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(Error::Shape(format!(
                    "concat along columns needs equal row counts: {dims:?}"
                )));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row(i));
                }
            }
            (rows, cols, out)
        };
        let r = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            Tensor::new(&[rows, cols], out)?,
            Op::Concat(parts.to_vec(), axis),
            r,
        ))
    }

    /// Gathers rows of a matrix (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (m, n) = (t.rows(), t.cols());
        if let Some(bad) = rows.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range for {m} rows"
            )));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &i in rows {
            out.extend_from_slice(t.row(i));
        }
        let r = self.req(table);
        Ok(self.push(
            Tensor::new(&[rows.len(), n], out)?,
            Op::Gather(table, rows.to_vec()),
            r,
        ))
    }

    /// Averages the rows of `x` that share a segment id. Segments without
    /// rows produce a zero row.
    pub fn segment_mean(&mut self, x: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if segments.len() != m {
            return Err(Error::Shape(format!(
                "segment_mean: {} segment ids for {m} rows",
                segments.len()
            )));
        }
        if let Some(bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(Error::Shape(format!(
                "segment id {bad} out of range for {n_segments} segments"
            )));
        }
        let mut counts = vec![0usize; n_segments];
        let mut out = vec![0.0; n_segments * n];
        for (i, &s) in segments.iter().enumerate() {
            counts[s] += 1;
            out[s * n..(s + 1) * n]
                .iter_mut()
                .zip(t.row(i))
                .for_each(|(o, v)| *o += v);
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                out[s * n..(s + 1) * n]
                    .iter_mut()
                    .for_each(|o| *o /= c as f64);
            }
        }
        let r = self.req(x);
        Ok(self.push(
            Tensor::new(&[n_segments, n], out)?,
            Op::SegmentMean(x, segments.to_vec(), counts),
            r,
        ))
    }

    /// Scatters the `L` entries of `a` into a `1 x width` row at column
    /// `index[i]`, summing collisions.
    pub fn scatter_cols(&mut self, a: Var, index: &[usize], width: usize) -> Result<Var> {
        let t = self.value(a);
        if t.len() != index.len() {
            return Err(Error::Shape(format!(
                "scatter_cols: {} indices for {} values",
                index.len(),
                t.len()
            )));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= width) {
            return Err(Error::Shape(format!(
                "scatter index {bad} out of range for width {width}"
            )));
        }
        let mut out = vec![0.0; width];
        for (v, &i) in t.values().iter().zip(index) {
            out[i] += v;
        }
        let r = self.req(a);
        Ok(self.push(
            Tensor::new(&[1, width], out)?,
            Op::ScatterCols(a, index.to_vec()),
            r,
        ))
    }

    /// One element (by flat index) as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.len() {
            return Err(Error::Shape(format!(
                "select index {index} out of range for shape {:?}",
                t.shape()
            )));
        }
        let v = t.values()[index];
        let r = self.req(x);
        Ok(self.push(Tensor::scalar(v), Op::Select(x, index), r))
    }

    /// `log(sum(exp(x)))` over every element, computed stably.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Shape("logsumexp of an empty tensor".into()));
        }
        if t.values().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NumericInput("logsumexp received NaN or +inf".into()));
        }
        let v = log_sum_exp(t.values());
        let r = self.req(x);
        Ok(self.push(Tensor::scalar(v), Op::LogSumExp(x), r))
    }

    /// Mean negative log-probability of integer targets under row-wise
    /// softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        check_finite(t, "cross_entropy")?;
        let (m, n) = (t.rows(), t.cols());
        if targets.len() != m {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {m} rows",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&c| c >= n) {
            return Err(Error::Shape(format!(
                "target class {bad} out of range for {n} classes"
            )));
        }
        let mut loss = 0.0;
        for (i, &c) in targets.iter().enumerate() {
            let row = t.row(i);
            loss += log_sum_exp(row) - row[c];
        }
        let r = self.req(logits);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy(logits, targets.to_vec()),
            r,
        ))
    }

    /// Scales every row to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = t.values().to_vec();
        for row in out.chunks_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let shape = t.shape().to_vec();
        let r = self.req(x);
        self.push(
            Tensor::new(&shape, out).expect("normalize shape"),
            Op::L2NormalizeRows(x, norms),
            r,
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Gradients are added to whatever
    /// the nodes already hold, so two calls without `zero_grads` double them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.req(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.accumulate_grad_owned(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        macro_rules! with_grad {
            ($v:expr, |$ga:ident| $body:block) => {
                if let Some($ga) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let (av, bv) = (ta.values(), tb.values());
                with_grad!(*a, |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x != 0.0 {
                                gb[p * n..(p + 1) * n]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(o, y)| *o += x * y);
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let ta = &nodes[a.0].value;
                let (r, c) = (ta.rows(), ta.cols());
                with_grad!(*a, |ga| {
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.values(), nodes[b.0].value.values());
                with_grad!(*a, |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                with_grad!(*b, |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddRow(a, row) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                });
                let n = nodes[row.0].value.len();
                with_grad!(*row, |gr| {
                    for (j, x) in g.iter().enumerate() {
                        gr[j % n] += x;
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let f = nodes[s.0].value.item();
                let xv = nodes[x.0].value.values();
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d * f);
                });
                with_grad!(*s, |gs| {
                    gs[0] += g.iter().zip(xv).map(|(d, v)| d * v).sum::<f64>();
                });
            }
            Op::Scale(x, c) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d * c);
                });
            }
            Op::Tanh(x) => {
                let y = out.values();
                with_grad!(*x, |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.values();
                with_grad!(*x, |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.values();
                with_grad!(*x, |gx| {
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let y = out.values();
                with_grad!(*x, |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j];
                    }
                });
            }
            Op::Log(x) => {
                let xv = nodes[x.0].value.values();
                with_grad!(*x, |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] / xv[j];
                    }
                });
            }
            Op::Softmax(x) => {
                let y = out.values();
                let c = out.cols();
                with_grad!(*x, |gx| {
                    for r in 0..out.rows() {
                        let (ys, gs) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = out.values();
                let c = out.cols();
                with_grad!(*x, |gx| {
                    for r in 0..out.rows() {
                        let gs = &g[r * c..(r + 1) * c];
                        let total: f64 = gs.iter().sum();
                        for j in 0..c {
                            gx[r * c + j] += gs[j] - y[r * c + j].exp() * total;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                });
            }
            Op::Mean(x, axis) => {
                let tx = &nodes[x.0].value;
                let (m, n) = (tx.rows(), tx.cols());
                let ndim = tx.shape().len();
                with_grad!(*x, |gx| {
                    if ndim <= 1 {
                        let d = g[0] / gx.len() as f64;
                        gx.iter_mut().for_each(|o| *o += d);
                    } else if *axis == 0 {
                        for r in 0..m {
                            for j in 0..n {
                                gx[r * n + j] += g[j] / m as f64;
                            }
                        }
                    } else {
                        for r in 0..m {
                            for j in 0..n {
                                gx[r * n + j] += g[r] / n as f64;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let cols = out.cols();
                if *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        with_grad!(*p, |gp| {
                            gp.iter_mut()
                                .zip(&g[offset..offset + len])
                                .for_each(|(o, x)| *o += x);
                        });
                        offset += len;
                    }
                } else {
                    let mut col = 0;
                    for p in parts {
                        let pc = nodes[p.0].value.cols();
                        with_grad!(*p, |gp| {
                            for r in 0..out.rows() {
                                for j in 0..pc {
                                    gp[r * pc + j] += g[r * cols + col + j];
                                }
                            }
                        });
                        col += pc;
                    }
                }
            }
            Op::Gather(table, rows) => {
                let n = out.cols();
                with_grad!(*table, |gt| {
                    for (r, &src) in rows.iter().enumerate() {
                        gt[src * n..(src + 1) * n]
                            .iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::SegmentMean(x, segments, counts) => {
                let n = out.cols();
                with_grad!(*x, |gx| {
                    for (r, &s) in segments.iter().enumerate() {
                        let c = counts[s] as f64;
                        gx[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(&g[s * n..(s + 1) * n])
                            .for_each(|(o, v)| *o += v / c);
                    }
                });
            }
            Op::ScatterCols(a, index) => {
                with_grad!(*a, |ga| {
                    for (j, &c) in index.iter().enumerate() {
                        ga[j] += g[c];
                    }
                });
            }
            Op::Select(x, index) => {
                with_grad!(*x, |gx| {
                    gx[*index] += g[0];
                });
            }
            Op::LogSumExp(x) => {
                let xv = nodes[x.0].value.values();
                let lse = out.item();
                with_grad!(*x, |gx| {
                    for j in 0..xv.len() {
                        gx[j] += g[0] * (xv[j] - lse).exp();
                    }
                });
            }
            Op::CrossEntropy(logits, targets) => {
                let t = &nodes[logits.0].value;
                let (m, n) = (t.rows(), t.cols());
                with_grad!(*logits, |gl| {
                    for (r, &c) in targets.iter().enumerate() {
                        let mut p = t.row(r).to_vec();
                        softmax_in_place(&mut p);
                        p[c] -= 1.0;
                        for j in 0..n {
                            gl[r * n + j] += g[0] * p[j] / m as f64;
                        }
                    }
                });
            }
            Op::L2NormalizeRows(x, norms) => {
                let y = out.values();
                let c = out.cols();
                with_grad!(*x, |gx| {
                    for (r, norm) in norms.iter().enumerate() {
                        let (ys, gs) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gs[j] - ys[j] * dot) / norm;
                        }
                    }
                });
            }
        }
    }
}
