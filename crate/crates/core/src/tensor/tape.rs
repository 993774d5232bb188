//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its parents. Node ids are assigned in creation order, so the tape is
//! always topologically sorted and a single reverse sweep visits each node
//! exactly once.

use std::sync::atomic::{AtomicU64, Ordering};

use super::value::{log_softmax_rows, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Maximum(Var, Var),
    Concat(Vec<Var>),
    Scale(Var, f64),
    LinComb(Vec<(Var, f64)>),
    LogSoftmax(Var),
    PickMean(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recording of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Only leaves created with `requires_grad` collect gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Adds a constant input (a leaf that never receives a gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.index].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage("variable belongs to a different tape".into()));
        }
        Ok(())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index].value.shape()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (r, k) = self.matrix_dims("matmul", a)?;
        let (k2, c) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), r, k, c);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let out = self.zip_with(a, b, f64::max);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Maximum(a, b), rg))
    }

    /// Adds a bias vector `[C]` to every row of `x: [N, C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (n, c) = self.matrix_dims("add_bias", x)?;
        if self.value(bias).len() != c || self.shape(bias).len() != 1 {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..n {
            for (o, bv) in out[r * c..(r + 1) * c].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Scale(x, factor), rg))
    }

    /// `Σ_i c_i · x_i` over same-shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (&(first, _), rest) = terms
            .split_first()
            .ok_or_else(|| Error::Usage("lin_comb of zero terms".into()))?;
        self.check(first)?;
        for &(v, _) in rest {
            self.same_shape("lin_comb", first, v)?;
        }
        let mut out = vec![0.0; self.value(first).len()];
        for &(v, c) in terms {
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        let shape = self.shape(first).to_vec();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::new(shape, out)?, Op::LinComb(terms.to_vec()), rg))
    }

    /// Column-wise concatenation of rank-2 tensors sharing a row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let (n, _) = self.matrix_dims("concat", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            self.check(p)?;
            let (pn, pc) = self.matrix_dims("concat", p)?;
            if pn != n {
                return Err(Error::dim("concat", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Row-wise log-softmax (max-shift stable).
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        self.matrix_dims("log_softmax", x)?;
        let out = log_softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// `(1/N) Σ_i x[i, labels[i]]` as a one-element tensor.
    pub fn pick_mean(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        self.check(x)?;
        let (n, k) = self.matrix_dims("pick_mean", x)?;
        if labels.len() != n {
            return Err(Error::dim("pick_mean", self.shape(x), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let v = self.value(x);
        let sum: f64 = labels.iter().enumerate().map(|(i, &y)| v.at(i, y)).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(sum / n as f64),
            Op::PickMean(x, labels.to_vec()),
            rg,
        ))
    }

    /// Mean log-probability of the true class, `(1/N) Σ_i log softmax(x_i)[y_i]`.
    pub fn mean_true_class_logprob(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.log_softmax(logits)?;
        self.pick_mean(ls, labels)
    }

    /// Mean cross-entropy loss of `logits` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.mean_true_class_logprob(logits, labels)?;
        self.scale(lp, -1.0)
    }

    /// Backpropagates from a one-element output with seed 1.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        self.check(output)?;
        if self.value(output).len() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar output, got shape {:?}; use backward_vjp",
                self.shape(output)
            )));
        }
        let seed = Tensor::full(self.shape(output), 1.0);
        self.backward_vjp(output, &seed)
    }

    /// Backpropagates the vector-Jacobian product seeded with `seed`.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward_vjp(&mut self, output: Var, seed: &Tensor) -> Result<()> {
        self.check(output)?;
        if seed.shape() != self.shape(output) {
            return Err(Error::dim("backward_vjp", self.shape(output), seed.shape()));
        }
        if !self.nodes[output.index].requires_grad {
            return Err(Error::Usage(
                "backward on a detached tensor (no gradient-carrying inputs)".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.index + 1];
        grads[output.index] = Some(seed.data().to_vec());

        for idx in (0..=output.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[idx];
                    match &mut node.grad {
                        Some(acc) => {
                            for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                                *a += d;
                            }
                        }
                        None => {
                            node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (r, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let c = self.shape(b)[1];
                    if self.requires_grad(a) {
                        // dA = G · Bᵀ
                        let bv = self.value(b).data();
                        let mut da = vec![0.0; r * k];
                        for i in 0..r {
                            for j in 0..c {
                                let gij = g[i * c + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i * k + p] += gij * bv[p * c + j];
                                }
                            }
                        }
                        accumulate(&mut grads, a, da);
                    }
                    if self.requires_grad(b) {
                        // dB = Aᵀ · G
                        let av = self.value(a).data();
                        let mut db = vec![0.0; k * c];
                        for i in 0..r {
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let row = &mut db[p * c..(p + 1) * c];
                                for (d, gv) in row.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                                    *d += aip * gv;
                                }
                            }
                        }
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.pass(&mut grads, a, g.clone());
                    self.pass(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    self.pass(&mut grads, b, g.iter().map(|v| -v).collect());
                    self.pass(&mut grads, a, g);
                }
                Op::AddBias(x, bias) => {
                    if self.requires_grad(bias) {
                        let c = self.value(bias).len();
                        let mut db = vec![0.0; c];
                        for row in g.chunks(c) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, bias, db);
                    }
                    self.pass(&mut grads, x, g);
                }
                Op::Relu(x) => {
                    let xv = self.value(x).data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.pass(&mut grads, x, dx);
                }
                Op::Maximum(a, b) => {
                    let (av, bv) = (self.value(a).data(), self.value(b).data());
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        if av[i] >= bv[i] {
                            da[i] = g[i];
                        } else {
                            db[i] = g[i];
                        }
                    }
                    self.pass(&mut grads, a, da);
                    self.pass(&mut grads, b, db);
                }
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
                    let total: usize = widths.iter().sum();
                    let n = g.len() / total;
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        if self.requires_grad(p) {
                            let mut dp = Vec::with_capacity(n * w);
                            for r in 0..n {
                                dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        offset += w;
                    }
                }
                Op::Scale(x, f) => {
                    self.pass(&mut grads, x, g.iter().map(|v| v * f).collect());
                }
                Op::LinComb(terms) => {
                    for (v, c) in terms {
                        self.pass(&mut grads, v, g.iter().map(|x| x * c).collect());
                    }
                }
                Op::LogSoftmax(x) => {
                    // dx = g - softmax * rowsum(g)
                    let out = self.nodes[idx].value.data();
                    let c = self.shape(x)[1];
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..g.len() / c {
                        let gr = &g[r * c..(r + 1) * c];
                        let sum: f64 = gr.iter().sum();
                        for j in 0..c {
                            dx[r * c + j] = gr[j] - out[r * c + j].exp() * sum;
                        }
                    }
                    self.pass(&mut grads, x, dx);
                }
                Op::PickMean(x, labels) => {
                    let (n, k) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut dx = vec![0.0; n * k];
                    let s = g[0] / n as f64;
                    for (i, &y) in labels.iter().enumerate() {
                        dx[i * k + y] = s;
                    }
                    self.pass(&mut grads, x, dx);
                }
            }
        }
        Ok(())
    }

    fn pass(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if self.requires_grad(v) {
            accumulate(grads, v, g);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.index] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(&g) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * c..(p + 1) * c]) {
                *o += aip * bv;
            }
        }
    }
    out
}
