//! Reverse-mode automatic differentiation over a bounded operation set:
//! the matrix products, normalizations, softmax terms and reductions the
//! contrastive losses need, and nothing else.
//!
//! Values are recorded on a linear tape during the forward pass and
//! gradients propagate backward in one reverse sweep. Tensor storage is
//! f32; tape arithmetic runs in f64 so finite-difference gradient checks
//! are limited by the method, not by accumulation noise.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulTB(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    RowNormalize(usize),
    LogSoftmaxRows(usize, f64),
    SoftmaxRows(usize, f64),
    Log(usize),
    Exp(usize),
    Sum(usize),
    Mean(usize),
    RowDot(usize, usize),
    EmbedMean(usize, Vec<Vec<u32>>),
    Reshape(usize),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get_f64(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as an f32 tensor; zeros if no gradient reached the node.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => {
                Tensor::new(shape, g.iter().map(|&x| x as f32).collect()).expect("shape tracked")
            }
            None => Tensor::zeros(shape),
        }
    }

    /// Max gradient magnitude over a set of vars, for diagnostics.
    pub fn max_abs(&self, vars: &[Var]) -> f64 {
        vars.iter()
            .filter_map(|v| self.grads[v.0].as_ref())
            .flat_map(|g| g.iter().map(|x| x.abs()))
            .fold(0.0, f64::max)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a tensor; it participates in gradients if `grad_enabled`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let data = t.data().iter().map(|&x| x as f64).collect();
        self.push(t.shape().to_vec(), data, Op::Leaf, t.grad_enabled())
    }

    /// Register a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let data = t.data().iter().map(|&x| x as f64).collect();
        self.push(t.shape().to_vec(), data, Op::Leaf, false)
    }

    /// Register raw f64 data as a differentiable leaf (used by grad checks).
    pub fn leaf_f64(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(shape, data, Op::Leaf, true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data_f64(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Value as an f32 tensor.
    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.iter().map(|&x| x as f32).collect())
            .expect("tape shapes are consistent")
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn rg(&self, a: usize, b: usize) -> bool {
        self.nodes[a].requires_grad || self.nodes[b].requires_grad
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(CoreError::Shape(format!(
                "{what} expects a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    /// out[m,n] = a[m,k] x b[k,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(CoreError::Shape(format!(
                "matmul inner dims differ: {ka} vs {kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        mm(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut out);
        let rg = self.rg(a.0, b.0);
        Ok(self.push(vec![m, n], out, Op::MatMul(a.0, b.0), rg))
    }

    /// out[m,n] = a[m,k] x b[n,k]^T — rows of `b` dotted against rows of `a`.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul_tb lhs")?;
        let (n, kb) = self.dims2(b, "matmul_tb rhs")?;
        if ka != kb {
            return Err(CoreError::Shape(format!(
                "matmul_tb inner dims differ: {ka} vs {kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        mm_tb(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut out);
        let rg = self.rg(a.0, b.0);
        Ok(self.push(vec![m, n], out, Op::MatMulTB(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::Shape("add shape mismatch".into()));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a.0, b.0);
        Ok(self.push(shape, data, Op::Add(a.0, b.0), rg))
    }

    /// Broadcast-add a length-n row vector to every row of an [m,n] matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row matrix")?;
        if self.nodes[row.0].shape != [n] {
            return Err(CoreError::Shape(format!(
                "add_row vector shape {:?} does not match row width {n}",
                self.nodes[row.0].shape
            )));
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.nodes[row.0].data[j];
            }
        }
        let rg = self.rg(a.0, row.0);
        Ok(self.push(vec![m, n], data, Op::AddRow(a.0, row.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::Shape("mul shape mismatch".into()));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a.0, b.0);
        Ok(self.push(shape, data, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, data, Op::Scale(a.0, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, data, Op::Relu(a.0), rg)
    }

    /// L2-normalize every row of a matrix. Zero rows are a domain error.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "row_normalize")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[a.0].data[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-30 {
                return Err(CoreError::Domain(format!(
                    "row_normalize: row {i} has zero norm"
                )));
            }
            for j in 0..n {
                data[i * n + j] = row[j] / norm;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![m, n], data, Op::RowNormalize(a.0), rg))
    }

    /// Row-wise log-softmax of `a / tau`, stabilized by row-max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(CoreError::Domain(format!("tau must be positive, got {tau}")));
        }
        let (m, n) = self.dims2(a, "log_softmax_rows")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[a.0].data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
            let lse = row
                .iter()
                .map(|x| (x / tau - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            for j in 0..n {
                data[i * n + j] = row[j] / tau - lse;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![m, n], data, Op::LogSoftmaxRows(a.0, tau), rg))
    }

    /// Row-wise softmax of `a / tau`.
    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        let ls = self.log_softmax_rows(a, tau)?;
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let data: Vec<f64> = self.nodes[ls.0].data.iter().map(|x| x.exp()).collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![m, n], data, Op::SoftmaxRows(a.0, tau), rg))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, data, Op::Log(a.0), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, data, Op::Exp(a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let len = self.nodes[a.0].data.len();
        let s: f64 = self.nodes[a.0].data.iter().sum::<f64>() / len as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], Op::Mean(a.0), rg)
    }

    /// Per-row dot product of two [m,k] matrices, yielding [m].
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "row_dot lhs")?;
        let (mb, kb) = self.dims2(b, "row_dot rhs")?;
        if m != mb || k != kb {
            return Err(CoreError::Shape("row_dot shape mismatch".into()));
        }
        let mut data = vec![0.0; m];
        for i in 0..m {
            let ra = &self.nodes[a.0].data[i * k..(i + 1) * k];
            let rb = &self.nodes[b.0].data[i * k..(i + 1) * k];
            data[i] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        }
        let rg = self.rg(a.0, b.0);
        Ok(self.push(vec![m], data, Op::RowDot(a.0, b.0), rg))
    }

    /// Mean-pool embedding-table rows per token sequence: out[b] is the mean
    /// of `table` rows selected by `ids[b]`.
    pub fn embed_mean(&mut self, table: Var, ids: &[Vec<u32>]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embed_mean table")?;
        if ids.is_empty() {
            return Err(CoreError::Shape("embed_mean: empty batch".into()));
        }
        let mut data = vec![0.0; ids.len() * d];
        for (b, seq) in ids.iter().enumerate() {
            if seq.is_empty() {
                return Err(CoreError::Domain(format!("embed_mean: sequence {b} is empty")));
            }
            for &id in seq {
                if id as usize >= v {
                    return Err(CoreError::Domain(format!(
                        "embed_mean: token id {id} out of vocabulary {v}"
                    )));
                }
                let row = &self.nodes[table.0].data[id as usize * d..(id as usize + 1) * d];
                for j in 0..d {
                    data[b * d + j] += row[j];
                }
            }
            let inv = 1.0 / seq.len() as f64;
            for j in 0..d {
                data[b * d + j] *= inv;
            }
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::EmbedMean(table.0, ids.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(CoreError::Shape(format!(
                "reshape to {:?} does not preserve element count",
                shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, data, Op::Reshape(a.0), rg))
    }

    /// Differentiable cosine similarity of two equal-length vectors.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let la = self.nodes[a.0].data.len();
        let lb = self.nodes[b.0].data.len();
        if la != lb || self.nodes[a.0].shape.len() != 1 || self.nodes[b.0].shape.len() != 1 {
            return Err(CoreError::Shape(
                "cosine_sim expects equal-length vectors".into(),
            ));
        }
        let am = self.reshape(a, vec![1, la])?;
        let bm = self.reshape(b, vec![1, lb])?;
        let an = self.row_normalize(am)?;
        let bn = self.row_normalize(bm)?;
        self.row_dot(an, bn)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(CoreError::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        if !ln.data[0].is_finite() {
            return Err(CoreError::Numeric(format!(
                "backward on non-finite loss {}",
                ln.data[0]
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    mm_tb(g, &self.nodes[*b].data, m, n, k, &mut da);
                    acc(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    mm_ta(&self.nodes[*a].data, g, m, k, n, &mut db);
                    acc(grads, *b, &db);
                }
            }
            Op::MatMulTB(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[0];
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    mm(g, &self.nodes[*b].data, m, n, k, &mut da);
                    acc(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; n * k];
                    mm_ta(g, &self.nodes[*a].data, m, n, k, &mut db);
                    acc(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                if self.nodes[*a].requires_grad {
                    acc(grads, *a, g);
                }
                if self.nodes[*b].requires_grad {
                    acc(grads, *b, g);
                }
            }
            Op::AddRow(a, row) => {
                if self.nodes[*a].requires_grad {
                    acc(grads, *a, g);
                }
                if self.nodes[*row].requires_grad {
                    let n = self.nodes[*row].shape[0];
                    let m = self.nodes[*a].shape[0];
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dr[j] += g[i * n + j];
                        }
                    }
                    acc(grads, *row, &dr);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*b].data)
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    acc(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*a].data)
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    acc(grads, *b, &db);
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    acc(grads, *a, &da);
                }
            }
            Op::Relu(a) => {
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*a].data)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    acc(grads, *a, &da);
                }
            }
            Op::RowNormalize(a) => {
                if self.nodes[*a].requires_grad {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let x = &self.nodes[*a].data[i * n..(i + 1) * n];
                        let y = &node.data[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gy: f64 = gr.iter().zip(y).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            da[i * n + j] = (gr[j] - gy * y[j]) / norm;
                        }
                    }
                    acc(grads, *a, &da);
                }
            }
            Op::LogSoftmaxRows(a, tau) => {
                if self.nodes[*a].requires_grad {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let out = &node.data[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            let p = out[j].exp();
                            da[i * n + j] = (gr[j] - p * gsum) / tau;
                        }
                    }
                    acc(grads, *a, &da);
                }
            }
            Op::SoftmaxRows(a, tau) => {
                if self.nodes[*a].requires_grad {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let y = &node.data[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let gy: f64 = gr.iter().zip(y).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            da[i * n + j] = y[j] * (gr[j] - gy) / tau;
                        }
                    }
                    acc(grads, *a, &da);
                }
            }
            Op::Log(a) => {
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*a].data)
                        .map(|(gi, xi)| gi / xi)
                        .collect();
                    acc(grads, *a, &da);
                }
            }
            Op::Exp(a) => {
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = g.iter().zip(&node.data).map(|(gi, yi)| gi * yi).collect();
                    acc(grads, *a, &da);
                }
            }
            Op::Sum(a) => {
                if self.nodes[*a].requires_grad {
                    let da = vec![g[0]; self.nodes[*a].data.len()];
                    acc(grads, *a, &da);
                }
            }
            Op::Mean(a) => {
                if self.nodes[*a].requires_grad {
                    let len = self.nodes[*a].data.len();
                    let da = vec![g[0] / len as f64; len];
                    acc(grads, *a, &da);
                }
            }
            Op::RowDot(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            da[i * k + j] = g[i] * self.nodes[*b].data[i * k + j];
                        }
                    }
                    acc(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            db[i * k + j] = g[i] * self.nodes[*a].data[i * k + j];
                        }
                    }
                    acc(grads, *b, &db);
                }
            }
            Op::EmbedMean(table, ids) => {
                if self.nodes[*table].requires_grad {
                    let d = self.nodes[*table].shape[1];
                    let mut dt = vec![0.0; self.nodes[*table].data.len()];
                    for (b, seq) in ids.iter().enumerate() {
                        let inv = 1.0 / seq.len() as f64;
                        for &id in seq {
                            for j in 0..d {
                                dt[id as usize * d + j] += g[b * d + j] * inv;
                            }
                        }
                    }
                    acc(grads, *table, &dt);
                }
            }
            Op::Reshape(a) => {
                if self.nodes[*a].requires_grad {
                    acc(grads, *a, g);
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], idx: usize, contribution: &[f64]) {
    match &mut grads[idx] {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contribution) {
                *gi += ci;
            }
        }
        slot => *slot = Some(contribution.to_vec()),
    }
}

/// out[m,n] = a[m,k] x b[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,n] = a[m,k] x b[n,k]^T
fn mm_tb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// out[k,n] = a[m,k]^T x b[m,n]
fn mm_ta(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Compare analytic gradients against central finite differences.
///
/// Returns the max over all parameter elements of
/// `|analytic - fd| / (|analytic| + |fd| + 1e-8)`. The loss closure must be
/// deterministic and scalar-valued.
pub fn grad_check<F>(params: &[Tensor], epsilon: f64, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(CoreError::Domain(format!(
            "grad_check epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    let base: Vec<(Vec<usize>, Vec<f64>)> = params
        .iter()
        .map(|t| {
            (
                t.shape().to_vec(),
                t.data().iter().map(|&x| x as f64).collect(),
            )
        })
        .collect();

    let eval = |vals: &[(Vec<usize>, Vec<f64>)]| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|(s, d)| tape.leaf_f64(s.clone(), d.clone()))
            .collect();
        let out = loss_fn(&mut tape, &vars)?;
        if tape.data_f64(out).len() != 1 {
            return Err(CoreError::Shape("grad_check loss must be scalar".into()));
        }
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(CoreError::Numeric(format!("non-finite loss {v}")));
        }
        Ok((tape, out))
    };

    let (tape, out) = eval(&base)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = (0..base.len())
        .map(|i| match grads.get_f64(Var(i)) {
            Some(g) => g.to_vec(),
            None => vec![0.0; base[i].1.len()],
        })
        .collect();

    let mut worst = 0.0f64;
    let mut perturbed = base.clone();
    for pi in 0..base.len() {
        for ei in 0..base[pi].1.len() {
            let orig = base[pi].1[ei];
            perturbed[pi].1[ei] = orig + epsilon;
            let (tp, op) = eval(&perturbed)?;
            let plus = tp.scalar(op);
            perturbed[pi].1[ei] = orig - epsilon;
            let (tm, om) = eval(&perturbed)?;
            let minus = tm.scalar(om);
            perturbed[pi].1[ei] = orig;
            let fd = (plus - minus) / (2.0 * epsilon);
            let a = analytic[pi][ei];
            let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
