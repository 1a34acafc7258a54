use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
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
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, b: Var },
    AddTiled { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    ScaleBy { a: Var, s: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var },
    Gelu { x: Var },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape { a: Var },
    GatherRows { a: Var, idx: Vec<usize> },
    IndexAddRows { a: Var, rows: Vec<usize>, upd: Var },
    GatherElements { a: Var, idx: Vec<(usize, usize)> },
    Pick { a: Var, i: usize },
    ConcatRows { parts: Vec<Var> },
    Sum { a: Var },
    Mean { a: Var },
    CosineMatrix { a: Var, b: Var, na: Vec<f64>, nb: Vec<f64> },
    CrossEntropy { s: Var, labels: Vec<usize>, tau: f64, probs: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Operation record for one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape {
            op,
            left: other.to_vec(),
            right: vec![],
        }),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
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

    /// A constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A trainable leaf; its gradient is populated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    /// `[m×k] · [n×k]ᵀ`, the usual `x · Wᵀ` of a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul_nt", self.value(a))?;
        let (n, k2) = matrix_dims("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMulNt { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        Ok(self.push(value, &[a], Op::Transpose { a, rows, cols }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, &[a], Op::Reshape { a }))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, &[a, b], Op::Mul { a, b }))
    }

    /// Adds a length-`n` vector to every row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.last_dim();
        if tb.len() != n || tb.rank() != 1 {
            return Err(Error::Shape {
                op: "add_row",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        Ok(self.push(out, &[a, b], Op::AddRow { a, b }))
    }

    /// Adds `b` to each consecutive `b.len()`-sized block of `a`
    /// (e.g. positional embeddings onto a batch of sequences).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.is_empty() || ta.len() % tb.len() != 0 || ta.last_dim() != tb.last_dim() {
            return Err(Error::Shape {
                op: "add_tiled",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for block in out.data_mut().chunks_mut(tb.len()) {
            for (x, y) in block.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        Ok(self.push(out, &[a, b], Op::AddTiled { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        Ok(self.push(value, &[a], Op::Scale { a, c }))
    }

    /// Multiplies `a` by a scalar node `s`, differentiable in both.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.value(s).item()?;
        let value = self.value(a).map(|x| x * c);
        Ok(self.push(value, &[a, s], Op::ScaleBy { a, s }))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        Ok(self.push(value, &[x], Op::Gelu { x }))
    }

    // ---- normalisation --------------------------------------------------

    /// Standardises each row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if d == 0 || tx.rank() == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        if !(eps > 0.0) {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, &[x, gain, bias], Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Row-wise softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        if c == 0 || tx.rank() == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        let mut out = tx.clone();
        softmax_rows(out.data_mut(), c);
        Ok(self.push(out, &[x], Op::Softmax { x }))
    }

    // ---- indexing -------------------------------------------------------

    /// Rows `idx` of a matrix, in order (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = matrix_dims("gather_rows", self.value(a))?;
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(self.value(a).row(i));
        }
        let value = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.push(value, &[a], Op::GatherRows { a, idx: idx.to_vec() }))
    }

    /// `out = a` with `upd[r]` added onto row `rows[r]`.
    pub fn index_add_rows(&mut self, a: Var, rows: &[usize], upd: Var) -> Result<Var> {
        let (n, cols) = matrix_dims("index_add_rows", self.value(a))?;
        let (k, ucols) = matrix_dims("index_add_rows", self.value(upd))?;
        if ucols != cols || k != rows.len() {
            return Err(Error::Shape {
                op: "index_add_rows",
                left: vec![rows.len(), cols],
                right: vec![k, ucols],
            });
        }
        let mut out = self.value(a).clone();
        for (r, &target) in rows.iter().enumerate() {
            if target >= n {
                return Err(Error::Index {
                    what: "index_add_rows",
                    index: target,
                    len: n,
                });
            }
            let src = self.value(upd).row(r);
            for (x, y) in out.row_mut(target).iter_mut().zip(src) {
                *x += y;
            }
        }
        Ok(self.push(out, &[a, upd], Op::IndexAddRows { a, rows: rows.to_vec(), upd }))
    }

    /// Entries `a[i, j]` for each `(i, j)` as a vector.
    pub fn gather_elements(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = matrix_dims("gather_elements", self.value(a))?;
        let mut out = Vec::with_capacity(idx.len());
        for &(i, j) in idx {
            if i >= rows || j >= cols {
                return Err(Error::Index {
                    what: "gather_elements",
                    index: i * cols + j,
                    len: rows * cols,
                });
            }
            out.push(self.value(a).at2(i, j));
        }
        let value = Tensor::vector(out);
        Ok(self.push(value, &[a], Op::GatherElements { a, idx: idx.to_vec() }))
    }

    /// Element `i` of the flattened tensor, as a scalar node.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let len = self.value(a).len();
        let x = *self.value(a).data().get(i).ok_or(Error::Index {
            what: "pick",
            index: i,
            len,
        })?;
        Ok(self.push(Tensor::scalar(x), &[a], Op::Pick { a, i }))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyAxis { op: "concat_rows" })?;
        let cols = matrix_dims("concat_rows", self.value(first))?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = matrix_dims("concat_rows", self.value(p))?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: vec![rows, cols],
                    right: vec![r, c],
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, parts, Op::ConcatRows { parts: parts.to_vec() }))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), &[a], Op::Sum { a }))
    }

    /// Mean over all elements.
    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::EmptyAxis { op: "reduce_mean" });
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(s), &[a], Op::Mean { a }))
    }

    // ---- similarity and loss --------------------------------------------

    /// Pairwise cosine similarities between the rows of `a` (`m×d`) and the
    /// rows of `b` (`n×d`), giving `m×n`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = matrix_dims("cosine_matrix", self.value(a))?;
        let (n, d2) = matrix_dims("cosine_matrix", self.value(b))?;
        if d != d2 {
            return Err(Error::Shape {
                op: "cosine_matrix",
                left: vec![m, d],
                right: vec![n, d2],
            });
        }
        let norms = |t: &Tensor, rows: usize| -> Result<Vec<f64>> {
            (0..rows)
                .map(|i| {
                    let nrm = super::norm(t.row(i));
                    if nrm > 0.0 && nrm.is_finite() {
                        Ok(nrm)
                    } else {
                        Err(Error::DegenerateVector { op: "cosine_similarity" })
                    }
                })
                .collect()
        };
        let na = norms(self.value(a), m)?;
        let nb = norms(self.value(b), n)?;
        let mut out = vec![0.0; m * n];
        gemm(m, d, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] /= na[i] * nb[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::CosineMatrix { a, b, na, nb }))
    }

    /// Cosine similarity of two vectors of equal length, as a scalar node.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let (lu, lv) = (self.value(u).len(), self.value(v).len());
        if lu != lv {
            return Err(Error::Shape {
                op: "cosine_similarity",
                left: self.value(u).shape().to_vec(),
                right: self.value(v).shape().to_vec(),
            });
        }
        let u2 = self.reshape(u, &[1, lu])?;
        let v2 = self.reshape(v, &[1, lv])?;
        let c = self.cosine_matrix(u2, v2)?;
        self.reshape(c, &[])
    }

    /// Mean over rows of `-log softmax(sims / tau)[label]`.
    ///
    /// `sims` is `B×N` (or a single length-`N` row). The log-sum-exp keeps
    /// the non-maximal terms in a `ln_1p` so that near-saturated rows retain
    /// full relative precision.
    pub fn cross_entropy(&mut self, sims: Var, labels: &[usize], tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        let t = self.value(sims);
        let n = t.last_dim();
        if n == 0 || t.rank() == 0 {
            return Err(Error::EmptyAxis { op: "cross_entropy" });
        }
        let rows = t.len() / n;
        if labels.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut probs = vec![0.0; t.len()];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= n {
                return Err(Error::Index {
                    what: "class label",
                    index: label,
                    len: n,
                });
            }
            let z: Vec<f64> = t.row(r).iter().map(|s| s / tau).collect();
            let (arg, m) = z
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            let mut rest = 0.0;
            for (j, &v) in z.iter().enumerate() {
                let e = (v - m).exp();
                probs[r * n + j] = e;
                if j != arg {
                    rest += e;
                }
            }
            let denom = 1.0 + rest;
            for p in &mut probs[r * n..(r + 1) * n] {
                *p /= denom;
            }
            total += rest.ln_1p() + (m - z[label]);
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            value,
            &[sims],
            Op::CrossEntropy {
                s: sims,
                labels: labels.to_vec(),
                tau,
                probs,
            },
        ))
    }

    /// Scaled dot-product attention over `batch` independent sequences of
    /// length `seq`, split into `heads` heads. `q`, `k`, `v` are
    /// `(batch·seq)×D`; the result has the same shape, heads concatenated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, d) = matrix_dims("attention", self.value(q))?;
        for other in [k, v] {
            if self.value(other).shape() != [rows, d] {
                return Err(Error::Shape {
                    op: "attention",
                    left: vec![rows, d],
                    right: self.value(other).shape().to_vec(),
                });
            }
        }
        if heads == 0 || d % heads != 0 || rows != batch * seq {
            return Err(Error::config(format!(
                "attention: {rows}×{d} is not {batch} sequences of {seq} tokens with {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let (mut qh, mut kh, mut vh) = (vec![0.0; seq * dh], vec![0.0; seq * dh], vec![0.0; seq * dh]);
        let mut oh = vec![0.0; seq * dh];
        for b in 0..batch {
            for h in 0..heads {
                extract_head(self.value(q).data(), b, h, seq, d, dh, &mut qh);
                extract_head(self.value(k).data(), b, h, seq, d, dh, &mut kh);
                extract_head(self.value(v).data(), b, h, seq, d, dh, &mut vh);
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(seq, dh, seq, &qh, false, &kh, true, p, false);
                p.iter_mut().for_each(|x| *x *= scale);
                softmax_rows(p, seq);
                gemm(seq, seq, dh, p, false, &vh, false, &mut oh, false);
                scatter_head(&oh, b, h, seq, d, dh, &mut out, false);
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            value,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates `d loss / d x` to every trainable leaf reachable from the
    /// scalar `loss`, adding onto any gradient already stored there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Rank {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(grads, nodes, $v)
            };
        }

        match &nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    gemm(m, n, k, g, false, val(b), true, slot!(a), true);
                }
                if wants(b) {
                    gemm(k, m, n, val(a), true, g, false, slot!(b), true);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if wants(a) {
                    gemm(m, n, k, g, false, val(b), false, slot!(a), true);
                }
                if wants(b) {
                    gemm(n, m, k, g, true, val(a), false, slot!(b), true);
                }
            }
            &Op::Add { a, b } => {
                for (v, sign) in [(a, 1.0), (b, 1.0)] {
                    if wants(v) {
                        slot!(v).iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            &Op::Sub { a, b } => {
                for (v, sign) in [(a, 1.0), (b, -1.0)] {
                    if wants(v) {
                        slot!(v).iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let other = val(b);
                    slot!(a).iter_mut().zip(g).zip(other).for_each(|((x, y), o)| *x += y * o);
                }
                if wants(b) {
                    let other = val(a);
                    slot!(b).iter_mut().zip(g).zip(other).for_each(|((x, y), o)| *x += y * o);
                }
            }
            &Op::AddRow { a, b } => {
                if wants(a) {
                    slot!(a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(b) {
                    let db = slot!(b);
                    let n = db.len();
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::AddTiled { a, b } => {
                if wants(a) {
                    slot!(a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(b) {
                    let db = slot!(b);
                    let n = db.len();
                    for block in g.chunks(n) {
                        db.iter_mut().zip(block).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Scale { a, c } => {
                if wants(a) {
                    slot!(a).iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            &Op::ScaleBy { a, s } => {
                let c = val(s)[0];
                if wants(a) {
                    slot!(a).iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
                if wants(s) {
                    let ds: f64 = g.iter().zip(val(a)).map(|(y, x)| y * x).sum();
                    slot!(s)[0] += ds;
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = nodes[gain.0].value.len();
                if wants(gain) {
                    let dg = slot!(gain);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if wants(bias) {
                    let db = slot!(bias);
                    for grow in g.chunks(d) {
                        db.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                }
                if wants(x) {
                    let gv = val(gain);
                    let dx = slot!(x);
                    let mut dxhat = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            mean_dh += dxhat[j];
                            mean_dh_h += dxhat[j] * hrow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rs * (dxhat[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Softmax { x } => {
                if wants(x) {
                    let y = nodes[id].value.data();
                    let c = nodes[id].value.last_dim();
                    let dx = slot!(x);
                    for ((grow, yrow), drow) in g.chunks(c).zip(y.chunks(c)).zip(dx.chunks_mut(c)) {
                        let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                if wants(x) {
                    let xv = val(x);
                    slot!(x).iter_mut().zip(g).zip(xv).for_each(|((d, y), &xi)| *d += y * gelu_grad(xi));
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if wants(a) {
                    let da = slot!(a);
                    for i in 0..rows {
                        for j in 0..cols {
                            da[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if wants(a) {
                    slot!(a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::GatherRows { a, idx } => {
                let a = *a;
                if wants(a) {
                    let cols = nodes[a.0].value.last_dim();
                    let da = slot!(a);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            da[src * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::IndexAddRows { a, rows, upd } => {
                let (a, upd) = (*a, *upd);
                if wants(a) {
                    slot!(a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(upd) {
                    let cols = nodes[a.0].value.last_dim();
                    let du = slot!(upd);
                    for (r, &target) in rows.iter().enumerate() {
                        for j in 0..cols {
                            du[r * cols + j] += g[target * cols + j];
                        }
                    }
                }
            }
            Op::GatherElements { a, idx } => {
                let a = *a;
                if wants(a) {
                    let cols = nodes[a.0].value.last_dim();
                    let da = slot!(a);
                    for (r, &(i, j)) in idx.iter().enumerate() {
                        da[i * cols + j] += g[r];
                    }
                }
            }
            &Op::Pick { a, i } => {
                if wants(a) {
                    slot!(a)[i] += g[0];
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(p) {
                        slot!(p).iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y);
                    }
                    offset += len;
                }
            }
            &Op::Sum { a } => {
                if wants(a) {
                    slot!(a).iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean { a } => {
                if wants(a) {
                    let da = slot!(a);
                    let c = g[0] / da.len() as f64;
                    da.iter_mut().for_each(|x| *x += c);
                }
            }
            Op::CosineMatrix { a, b, na, nb } => {
                let (a, b) = (*a, *b);
                let (m, n) = (na.len(), nb.len());
                let d = nodes[a.0].value.last_dim();
                let c = nodes[id].value.data();
                let unit = |data: &[f64], norms: &[f64]| -> Vec<f64> {
                    data.chunks(d).zip(norms).flat_map(|(row, nr)| row.iter().map(move |x| x / nr)).collect()
                };
                let ua = unit(val(a), na);
                let ub = unit(val(b), nb);
                if wants(a) {
                    // da_i = (Σ_j g_ij ub_j − (Σ_j g_ij c_ij) ua_i) / |a_i|
                    let mut gb = vec![0.0; m * d];
                    gemm(m, n, d, g, false, &ub, false, &mut gb, false);
                    let da = slot!(a);
                    for i in 0..m {
                        let gc: f64 = (0..n).map(|j| g[i * n + j] * c[i * n + j]).sum();
                        for t in 0..d {
                            da[i * d + t] += (gb[i * d + t] - gc * ua[i * d + t]) / na[i];
                        }
                    }
                }
                if wants(b) {
                    let mut ga = vec![0.0; n * d];
                    gemm(n, m, d, g, true, &ua, false, &mut ga, false);
                    let db = slot!(b);
                    for j in 0..n {
                        let gc: f64 = (0..m).map(|i| g[i * n + j] * c[i * n + j]).sum();
                        for t in 0..d {
                            db[j * d + t] += (ga[j * d + t] - gc * ub[j * d + t]) / nb[j];
                        }
                    }
                }
            }
            Op::CrossEntropy { s, labels, tau, probs } => {
                let s = *s;
                if wants(s) {
                    let n = probs.len() / labels.len();
                    let c = g[0] / (tau * labels.len() as f64);
                    let ds = slot!(s);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..n {
                            let y = if j == label { 1.0 } else { 0.0 };
                            ds[r * n + j] += c * (probs[r * n + j] - y);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                let (q, k, v, batch, seq, heads) = (*q, *k, *v, *batch, *seq, *heads);
                let d = nodes[q.0].value.last_dim();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let rows = batch * seq;
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut buf = [vec![0.0; seq * dh], vec![0.0; seq * dh], vec![0.0; seq * dh], vec![0.0; seq * dh]];
                let mut dp = vec![0.0; seq * seq];
                let mut tmp = vec![0.0; seq * dh];
                for b in 0..batch {
                    for h in 0..heads {
                        let [qh, kh, vh, go] = &mut buf;
                        extract_head(val(q), b, h, seq, d, dh, qh);
                        extract_head(val(k), b, h, seq, d, dh, kh);
                        extract_head(val(v), b, h, seq, d, dh, vh);
                        extract_head(g, b, h, seq, d, dh, go);
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        // dV = Pᵀ dO
                        gemm(seq, seq, dh, p, true, go, false, &mut tmp, false);
                        scatter_head(&tmp, b, h, seq, d, dh, &mut dv, true);
                        // dP = dO Vᵀ, then softmax backward
                        gemm(seq, dh, seq, go, false, vh, true, &mut dp, false);
                        for r in 0..seq {
                            let prow = &p[r * seq..(r + 1) * seq];
                            let drow = &mut dp[r * seq..(r + 1) * seq];
                            let s: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..seq {
                                drow[j] = prow[j] * (drow[j] - s) * scale;
                            }
                        }
                        gemm(seq, seq, dh, &dp, false, kh, false, &mut tmp, false);
                        scatter_head(&tmp, b, h, seq, d, dh, &mut dq, true);
                        gemm(seq, seq, dh, &dp, true, qh, false, &mut tmp, false);
                        scatter_head(&tmp, b, h, seq, d, dh, &mut dk, true);
                    }
                }
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if wants(var) {
                        slot!(var).iter_mut().zip(&buf).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn extract_head(src: &[f64], b: usize, h: usize, seq: usize, d: usize, dh: usize, dst: &mut [f64]) {
    for t in 0..seq {
        let base = (b * seq + t) * d + h * dh;
        dst[t * dh..(t + 1) * dh].copy_from_slice(&src[base..base + dh]);
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_head(src: &[f64], b: usize, h: usize, seq: usize, d: usize, dh: usize, dst: &mut [f64], add: bool) {
    for t in 0..seq {
        let base = (b * seq + t) * d + h * dh;
        let out = &mut dst[base..base + dh];
        let row = &src[t * dh..(t + 1) * dh];
        if add {
            out.iter_mut().zip(row).for_each(|(x, y)| *x += y);
        } else {
            out.copy_from_slice(row);
        }
    }
}
