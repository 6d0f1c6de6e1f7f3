//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended after its parents,
//! so node order is already a topological order and [`Graph::backward`] is a
//! single reverse sweep. Nodes whose ancestors contain no differentiable
//! leaf are marked `requires_grad = false` and never receive a gradient.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    LogSoftmax(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    SumRows(Var),
    MeanRows(Var),
    LogSumExpRows(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not require a gradient
    /// or does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    /// Adds a leaf. Set `requires_grad` for parameters or inputs whose
    /// gradient is wanted.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value of `v` into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_of(&self, v: Var, op: &'static str) -> Result<&Tensor> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::dim(op, t.shape(), &[0, 0]));
        }
        Ok(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row_vector(self.value(bias))?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Row-wise `z − logsumexp(z)` of an `n×K` logit matrix.
    pub fn log_softmax(&mut self, z: Var) -> Result<Var> {
        let t = self.matrix_of(z, "log_softmax")?;
        if t.cols() < 2 {
            return Err(Error::Contract(format!(
                "log_softmax needs at least 2 classes, got {}",
                t.cols()
            )));
        }
        let value = Tensor::new(
            t.shape().to_vec(),
            tensor::log_softmax_rows(t.data(), t.cols()),
        )?;
        let rg = self.rg(&[z]);
        Ok(self.push(value, Op::LogSoftmax(z), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// `n×K → [n]` row sums.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.matrix_of(x, "sum_rows")?;
        let value = Tensor::vector(t.data().chunks(t.cols()).map(|r| r.iter().sum()).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SumRows(x), rg))
    }

    /// `n×K → [n]` row means.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.matrix_of(x, "mean_rows")?;
        let k = t.cols() as f64;
        let value = Tensor::vector(
            t.data()
                .chunks(t.cols())
                .map(|r| r.iter().sum::<f64>() / k)
                .collect(),
        );
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MeanRows(x), rg))
    }

    /// `n×K → [n]` row-wise logsumexp.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.matrix_of(x, "logsumexp_rows")?;
        let value = Tensor::vector(t.data().chunks(t.cols()).map(tensor::logsumexp).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSumExpRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Picks `x[i, index[i]]` from each row, giving `[n]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.matrix_of(x, "gather")?;
        if index.len() != t.rows() {
            return Err(Error::dim("gather", t.shape(), &[index.len()]));
        }
        let k = t.cols();
        let mut out = Vec::with_capacity(index.len());
        for (i, &j) in index.iter().enumerate() {
            if j >= k {
                return Err(Error::Index(format!("label {j} with {k} classes")));
            }
            out.push(t.get(i, j));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Gather(x, index.to_vec()), rg))
    }

    // Composite losses. Batch reductions are means.

    /// Per-row cross-entropy `−log softmax(z)[y]`.
    pub fn cross_entropy_rows(&mut self, z: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(z)?;
        let picked = self.gather(lp, labels)?;
        Ok(self.scale(picked, -1.0))
    }

    /// Mean cross-entropy of logits `z` against class indices.
    pub fn cross_entropy(&mut self, z: Var, labels: &[usize]) -> Result<Var> {
        let rows = self.cross_entropy_rows(z, labels)?;
        self.mean(rows)
    }

    /// Per-row `KL(softmax(p) ‖ softmax(q))`, computed in log space.
    pub fn kl_div_rows(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        let (ps, qs) = (self.value(p_logits).shape(), self.value(q_logits).shape());
        if ps != qs {
            return Err(Error::dim("kl_div", ps, qs));
        }
        let lp = self.log_softmax(p_logits)?;
        let lq = self.log_softmax(q_logits)?;
        self.kl_from_log_probs(lp, lq)
    }

    /// Per-row KL from two log-probability matrices.
    pub fn kl_from_log_probs(&mut self, lp: Var, lq: Var) -> Result<Var> {
        let p = self.exp(lp);
        let diff = self.sub(lp, lq)?;
        let weighted = self.mul(p, diff)?;
        self.sum_rows(weighted)
    }

    /// Mean `KL(softmax(p) ‖ softmax(q))` over the batch.
    pub fn kl_div(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        let rows = self.kl_div_rows(p_logits, q_logits)?;
        self.mean(rows)
    }

    /// Per-row `Σ p log p` (negative entropy).
    fn neg_entropy_rows(&mut self, z: Var) -> Result<Var> {
        let lp = self.log_softmax(z)?;
        let p = self.exp(lp);
        let plogp = self.mul(p, lp)?;
        self.sum_rows(plogp)
    }

    /// Per-row Shannon entropy of `softmax(z)`.
    pub fn shannon_entropy(&mut self, z: Var) -> Result<Var> {
        let neg = self.neg_entropy_rows(z)?;
        Ok(self.scale(neg, -1.0))
    }

    /// Mean `KL(softmax(z) ‖ uniform)`, i.e. `ln K − H(softmax(z))`.
    pub fn kl_to_uniform(&mut self, z: Var) -> Result<Var> {
        let k = self.matrix_of(z, "kl_to_uniform")?.cols() as f64;
        let neg = self.neg_entropy_rows(z)?;
        let m = self.mean(neg)?;
        Ok(self.add_scalar(m, k.ln()))
    }

    /// Mean `KL(uniform ‖ softmax(z))`, i.e. `−ln K − mean_j log p_j`.
    pub fn kl_from_uniform(&mut self, z: Var) -> Result<Var> {
        let k = self.matrix_of(z, "kl_from_uniform")?.cols() as f64;
        let u = self.uniformity_rows(z)?;
        let m = self.mean(u)?;
        let neg = self.scale(m, -1.0);
        Ok(self.add_scalar(neg, -k.ln()))
    }

    /// Per-row `mean(z) − logsumexp(z)`: the uniformity surrogate used by
    /// the detection attack. Higher means closer to uniform.
    pub fn uniformity_rows(&mut self, z: Var) -> Result<Var> {
        let m = self.mean_rows(z)?;
        let lse = self.logsumexp_rows(z)?;
        self.sub(m, lse)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Contract(format!("unknown node {}", root.0)))?;
        if root_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if !root_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    tensor::matmul_nt(g.data(), bv.data(), m, k, n, &mut da);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    tensor::matmul_tn(av.data(), g.data(), m, k, n, &mut db);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db)?);
                }
            }
            Op::Relu(x) => {
                let dx = self.value(*x).zip_map(g, "relu", |v, d| if v > 0.0 { d } else { 0.0 })?;
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                // dx = dy − softmax · rowsum(dy)
                let y = &node.value;
                let k = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yrow, grow) in y.data().chunks(k).zip(g.data().chunks(k)) {
                    let s: f64 = grow.iter().sum();
                    dx.extend(yrow.iter().zip(grow).map(|(&lp, &d)| d - lp.exp() * s));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Exp(x) => {
                let dx = node.value.zip_map(g, "exp", |y, d| y * d)?;
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|d| -d));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da = self.value(*b).zip_map(g, "mul", |v, d| v * d)?;
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = self.value(*a).zip_map(g, "mul", |v, d| v * d)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|d| d * c));
            }
            Op::AddScalar(x) => {
                self.accumulate(grads, *x, g.clone());
            }
            Op::SumRows(x) | Op::MeanRows(x) => {
                let xv = self.value(*x);
                let k = xv.cols();
                let f = if matches!(node.op, Op::MeanRows(_)) {
                    1.0 / k as f64
                } else {
                    1.0
                };
                let mut dx = Vec::with_capacity(xv.len());
                for &d in g.data() {
                    dx.extend(std::iter::repeat(d * f).take(k));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::LogSumExpRows(x) => {
                let xv = self.value(*x);
                let k = xv.cols();
                let mut dx = Vec::with_capacity(xv.len());
                for ((row, &lse), &d) in xv.data().chunks(k).zip(node.value.data()).zip(g.data()) {
                    dx.extend(row.iter().map(|&z| d * (z - lse).exp()));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Sum(x) => {
                let d = g.item();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, d));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let d = g.item() / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), d));
            }
            Op::Gather(x, index) => {
                let xv = self.value(*x);
                let k = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (i, (&j, &d)) in index.iter().zip(g.data()).enumerate() {
                    dx.data_mut()[i * k + j] += d;
                }
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}
