use std::collections::HashMap;

use super::{Tensor, TensorId};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
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
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    /// Output value holds the normalized rows; `inv_std` is 1/sqrt(var + eps) per row.
    LayerNorm { x: Var, inv_std: Vec<f64> },
    /// Output value holds the probabilities.
    Softmax(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Pick { x: Var, index: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of executed primitives. Nodes are appended in execution
/// order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<TensorId, Var>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `a[m×k] · b[k×n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ`
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn add_into(acc: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).value.grad()
    }

    /// Gradient of a tensor previously registered with [`Tape::param`].
    pub fn grad_of(&self, t: &Tensor) -> Option<&[f64]> {
        self.params.get(&t.id()).and_then(|&v| self.grad(v))
    }

    /// Records `t` as a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        check_finite("leaf", t.data())?;
        let needs = t.requires_grad();
        let mut t = t;
        t.zero_grad();
        Ok(self.push(t, Op::Leaf, needs))
    }

    /// Records a copy of `t` as a leaf without gradient tracking.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        let mut t = t.clone();
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Registers a parameter. Registering the same tensor (by identity)
    /// twice returns the original handle.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(&t.id()) {
            return Ok(v);
        }
        let v = self.leaf(t.clone())?;
        self.params.insert(t.id(), v);
        Ok(v)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape(v).to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn emit(&mut self, op_name: &'static str, shape: &[usize], data: Vec<f64>, op: Op, needs: bool) -> Result<Var> {
        check_finite(op_name, &data)?;
        Ok(self.push(Tensor::new(shape, data)?, op, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.emit("matmul", &[m, n], data, Op::MatMul(a, b), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        self.emit("transpose", &[c, r], data, Op::Transpose(a), needs)
    }

    /// `x · wᵀ` for `x[T×in]` and `w[out×in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        self.matmul(x, wt)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.emit("add", &shape, data, Op::Add(a, b), needs)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.emit("mul", &shape, data, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.emit("scale", &shape, data, Op::Scale(a, c), needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.emit("sum", &[1], vec![s], Op::Sum(a), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.emit("gelu", &shape, data, Op::Gelu(a), needs)
    }

    /// Normalizes every vector along the last axis to zero mean and unit
    /// population variance: `(x - mean) / sqrt(var + eps)`. No affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps < 0.0 || !eps.is_finite() {
            return Err(Error::Contract(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let t = self.value(x);
        let d = t.cols();
        if d < 2 {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: vec![2],
            });
        }
        let rows = t.rows();
        let mut out = vec![0.0; t.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            if var + eps == 0.0 {
                return Err(Error::DivisionHazard);
            }
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.emit("layer_norm", &shape, out, Op::LayerNorm { x, inv_std }, needs)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.matrix_dims("softmax_rows", x)?;
        if causal && m > n {
            return Err(Error::Shape {
                op: "causal_softmax_rows",
                lhs: vec![m, n],
                rhs: vec![n, n],
            });
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let width = if causal { r + 1 } else { n };
            let row = &src[r * n..r * n + width];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * n..r * n + width];
            let mut z = 0.0;
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = (v - mx).exp();
                z += *oi;
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let needs = self.needs(x);
        self.emit("softmax_rows", &[m, n], out, Op::Softmax(x), needs)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; the rest get
    /// probability zero.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    /// Gathers rows `ids` of `table[V×d]` into a `[ids.len()×d]` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one id".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                extent: v,
            });
        }
        let t = self.value(table);
        let data: Vec<f64> = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let needs = self.needs(table);
        self.emit(
            "gather_rows",
            &[ids.len(), d],
            data,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    /// Embedding lookup; same as [`Tape::gather_rows`].
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Mean over rows of `-log softmax(logits_r)[labels_r]`. A rank-1
    /// `logits[V]` is treated as a single row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, v) = (t.rows(), t.cols());
        if labels.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                extent: v,
            });
        }
        let mut probs = vec![0.0; rows * v];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = t.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[label];
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        loss /= rows as f64;
        let needs = self.needs(logits);
        self.emit(
            "cross_entropy",
            &[1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                extent: n,
            });
        }
        let src = self.value(x).data();
        let data = (0..m).flat_map(|r| src[r * n + start..r * n + start + len].iter().copied()).collect();
        let needs = self.needs(x);
        self.emit("slice_cols", &[m, len], data, Op::SliceCols { x, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one part".into()))?;
        let (m, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix_dims("concat_cols", p)?;
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.emit("concat_cols", &[m, n], data, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Scalar at flat position `index`.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).len();
        if index >= n {
            return Err(Error::Index {
                op: "pick",
                index,
                extent: n,
            });
        }
        let v = self.value(x).data()[index];
        let needs = self.needs(x);
        self.emit("pick", &[1], vec![v], Op::Pick { x, index }, needs)
    }

    /// Propagates d`loss`/d(node) back to every leaf that requires grad and
    /// adds it to the leaf's stored gradient. Calling twice accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("loss {loss:?} is not on this tape")));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, gv: Vec<f64>| {
                if self.nodes[v.0].needs_grad {
                    add_into(&mut grads[v.0], gv);
                }
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if self.nodes[a.0].needs_grad {
                        send(*a, mm_nt(&g, bv.data(), m, n, k));
                    }
                    if self.nodes[b.0].needs_grad {
                        send(*b, mm_tn(av.data(), &g, m, k, n));
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] = g[i * c + j];
                        }
                    }
                    send(*a, ga);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
                Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    send(*a, vec![g[0]; n]);
                }
                Op::Gelu(a) => {
                    let x = self.nodes[a.0].value.data();
                    send(*a, g.iter().zip(x).map(|(gi, &xi)| gi * gelu_grad_scalar(xi)).collect());
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.data();
                    let d = node.value.cols();
                    let mut gx = vec![0.0; y.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mean_g = gr.iter().sum::<f64>() / d as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = is * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    send(*x, gx);
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..node.value.rows() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*x, gx);
                }
                Op::GatherRows { table, ids } => {
                    let tv = &self.nodes[table.0].value;
                    let d = tv.cols();
                    let mut gt = vec![0.0; tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                    send(*table, gt);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let v = self.nodes[logits.0].value.cols();
                    let rows = labels.len() as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0] / rows).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        gl[r * v + l] -= g[0] / rows;
                    }
                    send(*logits, gl);
                }
                Op::SliceCols { x, start } => {
                    let src = &self.nodes[x.0].value;
                    let (m, n) = (src.shape()[0], src.shape()[1]);
                    let len = node.value.shape()[1];
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        gx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    send(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.shape()[1];
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * n + offset..r * n + offset + w]);
                        }
                        send(p, gp);
                        offset += w;
                    }
                }
                Op::Pick { x, index } => {
                    let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                    gx[*index] = g[0];
                    send(*x, gx);
                }
            }
        }

        for (i, g) in leaf_grads {
            let t = &mut self.nodes[i].value;
            if t.requires_grad() {
                t.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(&mat(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let b = tape.constant(&mat(&[&[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        let y = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(&mat(&[&[1.0, 2.0]])).unwrap();
        let c = tape.constant(&mat(&[&[3.0], &[4.0]])).unwrap();
        let y = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1]);
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(&Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = tape.layer_norm(x, 0.0).unwrap();
        let s = 1.25f64.sqrt();
        let expect = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
        for (a, b) in tape.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((tape.value(y).data()[0] + 1.341641).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[3], vec![2.5; 3]).unwrap()).unwrap();
        assert!(matches!(tape.layer_norm(x, 0.0), Err(Error::DivisionHazard)));
        let y = tape.layer_norm(x, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rejects_width_one() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[3, 1])).unwrap();
        assert!(tape.layer_norm(x, 1e-5).is_err());
    }

    #[test]
    fn softmax_symmetry_and_causal_row_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(&mat(&[&[0.0, 0.0]])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(&mat(&[&[5.0, -3.0], &[1.0, 2.0]])).unwrap();
        let y = tape.causal_softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).row(0), &[1.0, 0.0]);
        let s: f64 = tape.value(y).row(1).iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[8], vec![0.3; 8]).unwrap()).unwrap();
        for label in [0, 7] {
            let l = tape.cross_entropy(x, &[label]).unwrap();
            assert!((tape.value(l).data()[0] - 8f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(tape.cross_entropy(x, &[8]), Err(Error::Index { .. })));
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut tape = Tape::new();
        let t = tape.constant(&Tensor::zeros(&[4, 2])).unwrap();
        assert!(matches!(tape.gather_rows(t, &[1, 4]), Err(Error::Index { index: 4, .. })));
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::param(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap()).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_square_grad_is_x_and_accumulates() {
        let data = vec![0.5, -1.5, 2.0];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::param(&[3], data.clone()).unwrap()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), data.as_slice());
        tape.backward(loss).unwrap();
        let doubled: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap(), doubled.as_slice());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::param(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn param_is_deduplicated() {
        let w = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&w).unwrap();
        let b = tape.param(&w).unwrap();
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad_of(&w).unwrap(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn non_finite_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[2], vec![1e300, 1e300]).unwrap()).unwrap();
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite { op: "mul" })));
        assert!(tape.constant(&Tensor::new(&[1], vec![f64::NAN]).unwrap()).is_err());
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(&mat(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]])).unwrap();
        let a = tape.slice_cols(x, 0, 1).unwrap();
        let b = tape.slice_cols(x, 1, 2).unwrap();
        assert_eq!(tape.value(b).data(), &[2.0, 3.0, 5.0, 6.0]);
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), tape.value(x).data());
    }
}
