//! Reverse-mode differentiable array engine.
//!
//! A `Tape` records every operation; `backward` replays it in reverse and
//! fills gradients for every node that (transitively) depends on a
//! gradient-requiring leaf. Tensors are rank-1 or rank-2, f64 throughout.
//! Every forward op validates that its output is finite, so NaN/Inf surface
//! at the op that produced them instead of three modules later.

use crate::error::{Error, Result};

pub const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_C1: f64 = 0.044_715;
const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn with_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }
}

/// Handle to a node on a `Tape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, from: usize, to: usize },
    Mean { x: Var, axis: usize },
    Sum { x: Var },
    EmbeddingLookup { table: Var, ids: Vec<u32> },
    CrossEntropy { logits: Var, targets: Vec<u32>, mask: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Operation tape. One forward pass per tape; `backward` consumes it.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    forward_macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ─── raw kernels ────────────────────────────────────────────────────────────

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,k] += a[m,n] · b[k,n]ᵀ
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            crow[p] += acc;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false, forward_macs: 0 }
    }

    /// Multiply-accumulate count of all matmuls recorded so far (forward only).
    pub fn forward_macs(&self) -> u64 {
        self.forward_macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, opname: &str) -> Result<Var> {
        if value.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(opname.to_string()));
        }
        self.nodes.push(Node { value, op, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf from raw parts. `requires_grad` marks it as a trainable parameter.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_grad(requires_grad);
        Ok(self.leaf(t))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.param(shape, data, false)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn dims2(&self, v: Var, opname: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].value.shape;
        if s.len() != 2 {
            return Err(Error::Shape(format!("{opname} expects rank-2 tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ─── forward ops ────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims differ: {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, m, k, n, &mut out);
        self.forward_macs += (m * k * n) as u64;
        let rg = self.needs(a) || self.needs(b);
        let t = Tensor::new(vec![m, n], out)?.with_grad(rg);
        self.push(t, Op::MatMul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "transpose")?;
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let rg = self.needs(x);
        let t = Tensor::new(vec![n, m], out)?.with_grad(rg);
        self.push(t, Op::Transpose { x }, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].value.shape != self.nodes[b.0].value.shape {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.nodes[a.0].value.shape, self.nodes[b.0].value.shape
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.needs(a) || self.needs(b);
        let t = Tensor::new(self.nodes[a.0].value.shape.clone(), out)?.with_grad(rg);
        self.push(t, Op::Add { a, b }, "add")
    }

    /// Broadcast-add a rank-1 `row` of width n to every row of a [t, n] tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        let rs = &self.nodes[row.0].value.shape;
        if rs.len() != 1 || rs[0] != n {
            return Err(Error::Shape(format!("add_row expects row of width {n}, got {rs:?}")));
        }
        let xd = &self.nodes[x.0].value.data;
        let rd = &self.nodes[row.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xd[i * n + j] + rd[j];
            }
        }
        let rg = self.needs(x) || self.needs(row);
        let t = Tensor::new(vec![m, n], out)?.with_grad(rg);
        self.push(t, Op::AddRow { x, row }, "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].value.shape != self.nodes[b.0].value.shape {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.nodes[a.0].value.shape, self.nodes[b.0].value.shape
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.needs(a) || self.needs(b);
        let t = Tensor::new(self.nodes[a.0].value.shape.clone(), out)?.with_grad(rg);
        self.push(t, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v * c).collect();
        let rg = self.needs(x);
        let t = Tensor::new(self.nodes[x.0].value.shape.clone(), out)?.with_grad(rg);
        self.push(t, Op::Scale { x, c }, "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.needs(x);
        let t = Tensor::new(self.nodes[x.0].value.shape.clone(), out)?.with_grad(rg);
        self.push(t, Op::Gelu { x }, "gelu")
    }

    /// Softmax over `axis` of a rank-2 tensor (1 = along each row, 0 = along each column).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax")?;
        if axis > 1 {
            return Err(Error::Axis { axis, rank: 2 });
        }
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; m * n];
        if axis == 1 {
            for i in 0..m {
                softmax_row(&xd[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
            }
        } else {
            let mut col = vec![0.0; m];
            let mut res = vec![0.0; m];
            for j in 0..n {
                for i in 0..m {
                    col[i] = xd[i * n + j];
                }
                softmax_row(&col, &mut res);
                for i in 0..m {
                    out[i * n + j] = res[i];
                }
            }
        }
        let rg = self.needs(x);
        let t = Tensor::new(vec![m, n], out)?.with_grad(rg);
        self.push(t, Op::Softmax { x, axis }, "softmax")
    }

    /// Per-row layer normalization with learned affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        for (v, nm) in [(gain, "gain"), (bias, "bias")] {
            let s = &self.nodes[v.0].value.shape;
            if s.len() != 1 || s[0] != n {
                return Err(Error::Shape(format!("layer_norm {nm} must be [{n}], got {s:?}")));
            }
        }
        let xd = &self.nodes[x.0].value.data;
        let gd = &self.nodes[gain.0].value.data;
        let bd = &self.nodes[bias.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mu) * inv;
                out[i * n + j] = xhat * gd[j] + bd[j];
            }
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        let t = Tensor::new(vec![m, n], out)?.with_grad(rg);
        self.push(t, Op::LayerNorm { x, gain, bias }, "layer_norm")
    }

    /// Concatenate rank-2 tensors along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::Axis { axis, rank: 2 });
        }
        let dims: Vec<(usize, usize)> =
            parts.iter().map(|&p| self.dims2(p, "concat")).collect::<Result<_>>()?;
        let (out, shape) = if axis == 0 {
            let n = dims[0].1;
            if dims.iter().any(|d| d.1 != n) {
                return Err(Error::Shape("concat axis=0 width mismatch".into()));
            }
            let total: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(total * n);
            for &p in parts {
                out.extend_from_slice(&self.nodes[p.0].value.data);
            }
            (out, vec![total, n])
        } else {
            let m = dims[0].0;
            if dims.iter().any(|d| d.0 != m) {
                return Err(Error::Shape("concat axis=1 height mismatch".into()));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut out = vec![0.0; m * total];
            let mut off = 0;
            for (&p, &(_, w)) in parts.iter().zip(&dims) {
                let pd = &self.nodes[p.0].value.data;
                for i in 0..m {
                    out[i * total + off..i * total + off + w]
                        .copy_from_slice(&pd[i * w..(i + 1) * w]);
                }
                off += w;
            }
            (out, vec![m, total])
        };
        let rg = parts.iter().any(|&p| self.needs(p));
        let t = Tensor::new(shape, out)?.with_grad(rg);
        self.push(t, Op::Concat { parts: parts.to_vec(), axis }, "concat")
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if from >= to || to > n {
            return Err(Error::Shape(format!("slice_cols {from}..{to} out of width {n}")));
        }
        let w = to - from;
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&xd[i * n + from..i * n + to]);
        }
        let rg = self.needs(x);
        let t = Tensor::new(vec![m, w], out)?.with_grad(rg);
        self.push(t, Op::SliceCols { x, from, to }, "slice_cols")
    }

    /// Mean-reduce one axis of a rank-2 tensor; output is rank-1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "mean")?;
        if axis > 1 {
            return Err(Error::Axis { axis, rank: 2 });
        }
        let xd = &self.nodes[x.0].value.data;
        let (out, shape) = if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += xd[i * n + j];
                }
            }
            for v in &mut out {
                *v /= m as f64;
            }
            (out, vec![n])
        } else {
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = xd[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
            }
            (out, vec![m])
        };
        let rg = self.needs(x);
        let t = Tensor::new(shape, out)?.with_grad(rg);
        self.push(t, Op::Mean { x, axis }, "mean")
    }

    /// Sum of all elements; scalar output (shape [1]).
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        let rg = self.needs(x);
        let t = Tensor::new(vec![1], vec![s])?.with_grad(rg);
        self.push(t, Op::Sum { x }, "sum")
    }

    /// Gather rows of `table` ([V, d]) by token id; output [len(ids), d].
    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding_lookup")?;
        if ids.is_empty() {
            return Err(Error::Empty("embedding_lookup with no ids".into()));
        }
        let td = &self.nodes[table.0].value.data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::OutOfVocab { id, vocab: v });
            }
            out.extend_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.needs(table);
        let t = Tensor::new(vec![ids.len(), d], out)?.with_grad(rg);
        self.push(t, Op::EmbeddingLookup { table, ids: ids.to_vec() }, "embedding_lookup")
    }

    /// Mean over mask-selected positions of −log softmax(logits)[target].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let (t_len, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::Shape(format!(
                "cross_entropy expects {t_len} targets/mask entries, got {}/{}",
                targets.len(),
                mask.len()
            )));
        }
        let m_count = mask.iter().filter(|&&b| b).count();
        if m_count == 0 {
            return Err(Error::Empty("cross_entropy with all positions masked out".into()));
        }
        for (&id, &on) in targets.iter().zip(mask) {
            if on && id as usize >= v {
                return Err(Error::OutOfVocab { id, vocab: v });
            }
        }
        let ld = &self.nodes[logits.0].value.data;
        let mut total = 0.0;
        for t in 0..t_len {
            if !mask[t] {
                continue;
            }
            let row = &ld[t * v..(t + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[t] as usize];
        }
        let loss = total / m_count as f64;
        let rg = self.needs(logits);
        let t = Tensor::new(vec![1], vec![loss])?.with_grad(rg);
        self.push(
            t,
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec() },
            "cross_entropy",
        )
    }

    // ─── backward ───────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call errors.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let lshape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(lshape.clone()));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].value.requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].grad.as_ref().unwrap().clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a.0].value.shape[0], self.nodes[a.0].value.shape[1]);
                    let n = self.nodes[b.0].value.shape[1];
                    if self.needs(a) {
                        let bd = self.nodes[b.0].value.data.clone();
                        let ga = self.grad_buf(a);
                        matmul_nt(&g, &bd, m, n, k, ga);
                    }
                    if self.needs(b) {
                        let ad = self.nodes[a.0].value.data.clone();
                        let gb = self.grad_buf(b);
                        matmul_tn(&ad, &g, m, k, n, gb);
                    }
                }
                Op::Transpose { x } => {
                    if self.needs(x) {
                        let (n, m) =
                            (self.nodes[i].value.shape[0], self.nodes[i].value.shape[1]);
                        let gx = self.grad_buf(x);
                        for r in 0..n {
                            for c in 0..m {
                                gx[c * n + r] += g[r * m + c];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for v in [a, b] {
                        if self.needs(v) {
                            let gv = self.grad_buf(v);
                            for (o, gi) in gv.iter_mut().zip(&g) {
                                *o += gi;
                            }
                        }
                    }
                }
                Op::AddRow { x, row } => {
                    if self.needs(x) {
                        let gx = self.grad_buf(x);
                        for (o, gi) in gx.iter_mut().zip(&g) {
                            *o += gi;
                        }
                    }
                    if self.needs(row) {
                        let n = self.nodes[row.0].value.shape[0];
                        let gr = self.grad_buf(row);
                        for (idx, gi) in g.iter().enumerate() {
                            gr[idx % n] += gi;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let bd = self.nodes[b.0].value.data.clone();
                        let ga = self.grad_buf(a);
                        for ((o, gi), bv) in ga.iter_mut().zip(&g).zip(&bd) {
                            *o += gi * bv;
                        }
                    }
                    if self.needs(b) {
                        let ad = self.nodes[a.0].value.data.clone();
                        let gb = self.grad_buf(b);
                        for ((o, gi), av) in gb.iter_mut().zip(&g).zip(&ad) {
                            *o += gi * av;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if self.needs(x) {
                        let gx = self.grad_buf(x);
                        for (o, gi) in gx.iter_mut().zip(&g) {
                            *o += gi * c;
                        }
                    }
                }
                Op::Gelu { x } => {
                    if self.needs(x) {
                        let xd = self.nodes[x.0].value.data.clone();
                        let gx = self.grad_buf(x);
                        for ((o, gi), &xv) in gx.iter_mut().zip(&g).zip(&xd) {
                            *o += gi * gelu_grad_scalar(xv);
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    if self.needs(x) {
                        let y = self.nodes[i].value.data.clone();
                        let (m, n) =
                            (self.nodes[i].value.shape[0], self.nodes[i].value.shape[1]);
                        let gx = self.grad_buf(x);
                        if axis == 1 {
                            for r in 0..m {
                                let yr = &y[r * n..(r + 1) * n];
                                let gr = &g[r * n..(r + 1) * n];
                                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                                for j in 0..n {
                                    gx[r * n + j] += yr[j] * (gr[j] - dot);
                                }
                            }
                        } else {
                            for j in 0..n {
                                let mut dot = 0.0;
                                for r in 0..m {
                                    dot += y[r * n + j] * g[r * n + j];
                                }
                                for r in 0..m {
                                    gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (m, n) = (self.nodes[x.0].value.shape[0], self.nodes[x.0].value.shape[1]);
                    let xd = self.nodes[x.0].value.data.clone();
                    let gd = self.nodes[gain.0].value.data.clone();
                    // recompute per-row stats
                    let mut xhat = vec![0.0; m * n];
                    let mut invs = vec![0.0; m];
                    for r in 0..m {
                        let row = &xd[r * n..(r + 1) * n];
                        let mu = row.iter().sum::<f64>() / n as f64;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        invs[r] = inv;
                        for j in 0..n {
                            xhat[r * n + j] = (row[j] - mu) * inv;
                        }
                    }
                    if self.needs(x) {
                        let gx = self.grad_buf(x);
                        for r in 0..m {
                            let mut mean_dxhat = 0.0;
                            let mut mean_dxhat_xhat = 0.0;
                            for j in 0..n {
                                let dxh = g[r * n + j] * gd[j];
                                mean_dxhat += dxh;
                                mean_dxhat_xhat += dxh * xhat[r * n + j];
                            }
                            mean_dxhat /= n as f64;
                            mean_dxhat_xhat /= n as f64;
                            for j in 0..n {
                                let dxh = g[r * n + j] * gd[j];
                                gx[r * n + j] +=
                                    invs[r] * (dxh - mean_dxhat - xhat[r * n + j] * mean_dxhat_xhat);
                            }
                        }
                    }
                    if self.needs(gain) {
                        let gg = self.grad_buf(gain);
                        for r in 0..m {
                            for j in 0..n {
                                gg[j] += g[r * n + j] * xhat[r * n + j];
                            }
                        }
                    }
                    if self.needs(bias) {
                        let gb = self.grad_buf(bias);
                        for r in 0..m {
                            for j in 0..n {
                                gb[j] += g[r * n + j];
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    if axis == 0 {
                        let mut off = 0;
                        for p in parts {
                            let len = self.nodes[p.0].value.numel();
                            if self.needs(p) {
                                let gp = self.grad_buf(p);
                                for (o, gi) in gp.iter_mut().zip(&g[off..off + len]) {
                                    *o += gi;
                                }
                            }
                            off += len;
                        }
                    } else {
                        let m = self.nodes[i].value.shape[0];
                        let total = self.nodes[i].value.shape[1];
                        let mut off = 0;
                        for p in parts {
                            let w = self.nodes[p.0].value.shape[1];
                            if self.needs(p) {
                                let gp = self.grad_buf(p);
                                for r in 0..m {
                                    for j in 0..w {
                                        gp[r * w + j] += g[r * total + off + j];
                                    }
                                }
                            }
                            off += w;
                        }
                    }
                }
                Op::SliceCols { x, from, to } => {
                    if self.needs(x) {
                        let n = self.nodes[x.0].value.shape[1];
                        let m = self.nodes[x.0].value.shape[0];
                        let w = to - from;
                        let gx = self.grad_buf(x);
                        for r in 0..m {
                            for j in 0..w {
                                gx[r * n + from + j] += g[r * w + j];
                            }
                        }
                    }
                }
                Op::Mean { x, axis } => {
                    if self.needs(x) {
                        let (m, n) =
                            (self.nodes[x.0].value.shape[0], self.nodes[x.0].value.shape[1]);
                        let gx = self.grad_buf(x);
                        if axis == 0 {
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
                    }
                }
                Op::Sum { x } => {
                    if self.needs(x) {
                        let gx = self.grad_buf(x);
                        for o in gx.iter_mut() {
                            *o += g[0];
                        }
                    }
                }
                Op::EmbeddingLookup { table, ids } => {
                    if self.needs(table) {
                        let d = self.nodes[table.0].value.shape[1];
                        let gt = self.grad_buf(table);
                        for (t, &id) in ids.iter().enumerate() {
                            let row = id as usize * d;
                            for j in 0..d {
                                gt[row + j] += g[t * d + j];
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, mask } => {
                    if self.needs(logits) {
                        let (t_len, v) =
                            (self.nodes[logits.0].value.shape[0], self.nodes[logits.0].value.shape[1]);
                        let ld = self.nodes[logits.0].value.data.clone();
                        let m_count = mask.iter().filter(|&&b| b).count() as f64;
                        let gl = self.grad_buf(logits);
                        let mut probs = vec![0.0; v];
                        for t in 0..t_len {
                            if !mask[t] {
                                continue;
                            }
                            softmax_row(&ld[t * v..(t + 1) * v], &mut probs);
                            for j in 0..v {
                                let delta = if j == targets[t] as usize { 1.0 } else { 0.0 };
                                gl[t * v + j] += g[0] * (probs[j] - delta) / m_count;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        let numel = self.nodes[v.0].value.numel();
        self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; numel])
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(out).data, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_sum() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_dim_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0], true).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn double_backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(vec![1], vec![2.0], true).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(vec![2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let mut tape = Tape::new();
        let frozen = tape.param(vec![2], vec![1.0, 2.0], false).unwrap();
        let live = tape.param(vec![2], vec![3.0, 4.0], true).unwrap();
        let prod = tape.mul(frozen, live).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert_eq!(tape.grad(live).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1], vec![1e308]).unwrap();
        let y = tape.constant(vec![1], vec![10.0]).unwrap();
        // 1e308 * 10 overflows to +inf
        assert!(matches!(tape.mul(x, y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn embedding_out_of_vocab_errors() {
        let mut tape = Tape::new();
        let table = tape.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(
            tape.embedding_lookup(table, &[3]),
            Err(Error::OutOfVocab { id: 3, vocab: 3 })
        ));
    }

    #[test]
    fn cross_entropy_all_masked_errors() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(tape.cross_entropy(logits, &[0, 1], &[false, false]).is_err());
    }
}
