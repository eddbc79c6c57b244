//! Dense tensor graph with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly on insertion and
//! records what it needs for the backward pass. Values are `f64` in row-major
//! order. [`Graph::backward`] walks the tape once in reverse creation order
//! (a valid reverse topological order, since operations only reference
//! earlier nodes) and accumulates gradients into every tensor that requires
//! them.

pub mod io;

use crate::error::{Error, Result};

/// Handle to a tensor stored in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

/// Dense n-dimensional value, optionally tracked for gradients.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    /// Populated by `backward` for tensors with `requires_grad`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Transpose { x: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Reshape { x: usize },
    GatherRows { x: usize, rows: Vec<usize> },
    Take { x: usize, idx: Vec<usize> },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize },
    Relu { x: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, pad_id: usize },
    Sum { x: usize },
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Tape of tensors and the operations that produced them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Softmax slices: iterate (outer, inner) pairs around `axis`.
fn axis_spans(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        });
        self.ops.push(op);
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Insert a leaf tensor.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Argument(format!(
                "leaf data of length {} does not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Leaf that never takes gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    /// `a[m,k] x b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(data, vec![m, n], rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// Elementwise sum of two identically shaped tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(data, shape, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// `x[m,n] + bias[n]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: sx,
                rhs: sb,
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let bv = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(bias.0);
        Ok(self.push(data, vec![m, n], rg, Op::AddRow { x: x.0, bias: bias.0 }))
    }

    /// Elementwise product of two identically shaped tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(data, shape, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(data, shape, rg, Op::Scale { x: x.0, c }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Argument(format!(
                "transpose expects a rank-2 tensor, got shape {:?}",
                s
            )));
        }
        let data = transpose_raw(self.data(x), s[0], s[1]);
        let rg = self.rg(x.0);
        Ok(self.push(data, vec![s[1], s[0]], rg, Op::Transpose { x: x.0 }))
    }

    /// Concatenate rank-1 tensors end to end, or rank-2 tensors along
    /// `axis` 0 (rows) / 1 (columns).
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::Argument("concat of zero tensors".into()));
        }
        let rank = self.shape(inputs[0]).len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::Argument(format!(
                "concat supports rank 1-2 tensors with axis < rank, got rank {rank} axis {axis}"
            )));
        }
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != rank || (rank == 2 && s[1 - axis] != self.shape(inputs[0])[1 - axis]) {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: self.shape(inputs[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let (data, shape) = if rank == 1 {
            let mut data = Vec::new();
            for &id in inputs {
                data.extend_from_slice(self.data(id));
            }
            let len = data.len();
            (data, vec![len])
        } else if axis == 0 {
            let cols = self.shape(inputs[0])[1];
            let mut data = Vec::new();
            let mut rows = 0;
            for &id in inputs {
                rows += self.shape(id)[0];
                data.extend_from_slice(self.data(id));
            }
            (data, vec![rows, cols])
        } else {
            let rows = self.shape(inputs[0])[0];
            let total_cols: usize = inputs.iter().map(|&id| self.shape(id)[1]).sum();
            let mut data = vec![0.0; rows * total_cols];
            let mut col_off = 0;
            for &id in inputs {
                let c = self.shape(id)[1];
                let src = self.data(id);
                for i in 0..rows {
                    data[i * total_cols + col_off..i * total_cols + col_off + c]
                        .copy_from_slice(&src[i * c..(i + 1) * c]);
                }
                col_off += c;
            }
            (data, vec![rows, total_cols])
        };
        let rg = inputs.iter().any(|&id| self.rg(id.0));
        let op = Op::Concat {
            inputs: inputs.iter().map(|id| id.0).collect(),
            axis,
        };
        Ok(self.push(data, shape, rg, op))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.tensor(x).numel() {
            return Err(Error::Argument(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(x),
                shape
            )));
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(data, shape, rg, Op::Reshape { x: x.0 }))
    }

    /// Select rows of a rank-2 tensor; rows may repeat. Gradients
    /// scatter-add back into the source rows.
    pub fn gather_rows(&mut self, x: TensorId, rows: &[usize]) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Argument(format!(
                "gather_rows expects a rank-2 tensor, got shape {:?}",
                s
            )));
        }
        let (m, n) = (s[0], s[1]);
        for &r in rows {
            if r >= m {
                return Err(Error::Index { index: r, extent: m });
            }
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            data,
            vec![rows.len(), n],
            rg,
            Op::GatherRows {
                x: x.0,
                rows: rows.to_vec(),
            },
        ))
    }

    /// One row of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&mut self, x: TensorId, i: usize) -> Result<TensorId> {
        let picked = self.gather_rows(x, &[i])?;
        let n = self.shape(picked)[1];
        self.reshape(picked, vec![n])
    }

    /// Embedding lookup: rows of `table[v,d]` addressed by token ids.
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Argument(format!(
                "embedding table must be rank 2, got shape {:?}",
                s
            )));
        }
        self.gather_rows(table, ids)
    }

    /// Select elements of a rank-1 tensor.
    pub fn take(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 {
            return Err(Error::Argument(format!(
                "take expects a rank-1 tensor, got shape {:?}",
                s
            )));
        }
        for &i in idx {
            if i >= s[0] {
                return Err(Error::Index {
                    index: i,
                    extent: s[0],
                });
            }
        }
        let src = self.data(x);
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x.0);
        Ok(self.push(
            data,
            vec![idx.len()],
            rg,
            Op::Take {
                x: x.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// The `k` largest entries of a rank-1 tensor. Ties break toward the
    /// lowest index and returned indices follow descending value order.
    /// Gradients flow only through the selected values; the selection
    /// itself is treated as constant.
    pub fn top_k(&mut self, x: TensorId, k: usize) -> Result<(Vec<usize>, TensorId)> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 {
            return Err(Error::Argument(format!(
                "top_k expects a rank-1 tensor, got shape {:?}",
                s
            )));
        }
        let n = s[0];
        if k == 0 || k > n {
            return Err(Error::Argument(format!(
                "top_k k={k} must be in 1..={n}"
            )));
        }
        let data = self.data(x);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            data[j]
                .partial_cmp(&data[i])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        order.truncate(k);
        let values = self.take(x, &order)?;
        Ok((order, values))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Argument(format!(
                "softmax axis {axis} out of range for shape {:?}",
                shape
            )));
        }
        let (outer, extent, inner) = axis_spans(&shape, axis);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * extent * inner + a * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..extent {
                    max = max.max(src[at(a)]);
                }
                let mut denom = 0.0;
                for a in 0..extent {
                    let e = (src[at(a)] - max).exp();
                    data[at(a)] = e;
                    denom += e;
                }
                for a in 0..extent {
                    data[at(a)] /= denom;
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(data, shape, rg, Op::Softmax { x: x.0, axis }))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| {
            Error::Argument("layer_norm on a rank-0 tensor".into())
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.data(x);
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        let rows = src.len() / d;
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let xs = &src[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                data[r * d + j] = (xs[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        Ok(self.push(
            data,
            shape,
            rg,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
        ))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(data, shape, rg, Op::Relu { x: x.0 }))
    }

    /// Mean over non-pad positions of `-log softmax(logits)[target]`.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        pad_id: usize,
    ) -> Result<TensorId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let (t, v) = (s[0], s[1]);
        let mut active = 0usize;
        for &tok in targets {
            if tok != pad_id {
                if tok >= v {
                    return Err(Error::Index {
                        index: tok,
                        extent: v,
                    });
                }
                active += 1;
            }
        }
        if active == 0 {
            return Err(Error::Argument(
                "cross_entropy: every target position is padding".into(),
            ));
        }
        let src = self.data(logits);
        let mut total = 0.0;
        for r in 0..t {
            if targets[r] == pad_id {
                continue;
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]];
        }
        let rg = self.rg(logits.0);
        Ok(self.push(
            vec![total / active as f64],
            vec![1],
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                pad_id,
            },
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let total: f64 = self.data(x).iter().sum();
        let rg = self.rg(x.0);
        Ok(self.push(vec![total], vec![1], rg, Op::Sum { x: x.0 }))
    }

    /// Arithmetic mean of scalar tensors.
    pub fn mean_of(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        if ids.is_empty() {
            return Err(Error::Argument("mean of zero tensors".into()));
        }
        let stacked = self.concat(ids, 0)?;
        let total = self.sum(stacked)?;
        self.scale(total, 1.0 / ids.len() as f64)
    }

    fn accum(&mut self, id: usize, contrib: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let numel = self.nodes[id].data.len();
        let g = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (dst, src) in g.iter_mut().zip(contrib) {
            *dst += src;
        }
    }

    fn out_grad(&self, id: usize) -> Option<Vec<f64>> {
        self.nodes[id].grad.clone()
    }

    /// Reverse pass from a scalar loss. Every tensor with `requires_grad`
    /// reachable from the loss ends up with an accumulated gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensor(loss).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let grad = match self.out_grad(i) {
                Some(g) => g,
                None => continue, // not on a path to the loss
            };
            match self.ops[i].clone() {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[1];
                    if self.rg(a) {
                        // dA = G . B^T
                        let bt = transpose_raw(&self.nodes[b].data, k, n);
                        let da = matmul_raw(&grad, &bt, m, n, k);
                        self.accum(a, &da);
                    }
                    if self.rg(b) {
                        // dB = A^T . G
                        let at = transpose_raw(&self.nodes[a].data, m, k);
                        let db = matmul_raw(&at, &grad, k, m, n);
                        self.accum(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    self.accum(a, &grad);
                    self.accum(b, &grad);
                }
                Op::AddRow { x, bias } => {
                    self.accum(x, &grad);
                    if self.rg(bias) {
                        let n = self.nodes[bias].data.len();
                        let mut db = vec![0.0; n];
                        for (i, g) in grad.iter().enumerate() {
                            db[i % n] += g;
                        }
                        self.accum(bias, &db);
                    }
                }
                Op::Mul { a, b } => {
                    if self.rg(a) {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(&self.nodes[b].data)
                            .map(|(g, v)| g * v)
                            .collect();
                        self.accum(a, &da);
                    }
                    if self.rg(b) {
                        let db: Vec<f64> = grad
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(g, v)| g * v)
                            .collect();
                        self.accum(b, &db);
                    }
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.accum(x, &dx);
                }
                Op::Transpose { x } => {
                    let s = &self.nodes[i].shape;
                    let dx = transpose_raw(&grad, s[0], s[1]);
                    self.accum(x, &dx);
                }
                Op::Concat { inputs, axis } => {
                    let rank = self.nodes[inputs[0]].shape.len();
                    if rank == 1 || axis == 0 {
                        let mut off = 0;
                        for &inp in &inputs {
                            let len = self.nodes[inp].data.len();
                            let slice = grad[off..off + len].to_vec();
                            self.accum(inp, &slice);
                            off += len;
                        }
                    } else {
                        let rows = self.nodes[i].shape[0];
                        let total_cols = self.nodes[i].shape[1];
                        let mut col_off = 0;
                        for &inp in &inputs {
                            let c = self.nodes[inp].shape[1];
                            let mut dx = vec![0.0; rows * c];
                            for r in 0..rows {
                                dx[r * c..(r + 1) * c].copy_from_slice(
                                    &grad[r * total_cols + col_off..r * total_cols + col_off + c],
                                );
                            }
                            self.accum(inp, &dx);
                            col_off += c;
                        }
                    }
                }
                Op::Reshape { x } => {
                    self.accum(x, &grad);
                }
                Op::GatherRows { x, rows } => {
                    if self.rg(x) {
                        let n = self.nodes[x].shape[1];
                        let mut dx = vec![0.0; self.nodes[x].data.len()];
                        for (out_r, &src_r) in rows.iter().enumerate() {
                            for j in 0..n {
                                dx[src_r * n + j] += grad[out_r * n + j];
                            }
                        }
                        self.accum(x, &dx);
                    }
                }
                Op::Take { x, idx } => {
                    if self.rg(x) {
                        let mut dx = vec![0.0; self.nodes[x].data.len()];
                        for (o, &src) in idx.iter().enumerate() {
                            dx[src] += grad[o];
                        }
                        self.accum(x, &dx);
                    }
                }
                Op::Softmax { x, axis } => {
                    if self.rg(x) {
                        let out = self.nodes[i].data.clone();
                        let shape = self.nodes[i].shape.clone();
                        let (outer, extent, inner) = axis_spans(&shape, axis);
                        let mut dx = vec![0.0; out.len()];
                        for o in 0..outer {
                            for ii in 0..inner {
                                let at = |a: usize| o * extent * inner + a * inner + ii;
                                let mut dot = 0.0;
                                for a in 0..extent {
                                    dot += grad[at(a)] * out[at(a)];
                                }
                                for a in 0..extent {
                                    dx[at(a)] = out[at(a)] * (grad[at(a)] - dot);
                                }
                            }
                        }
                        self.accum(x, &dx);
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let xs = self.nodes[x].data.clone();
                    let g = self.nodes[gain].data.clone();
                    let rows = xs.len() / d;
                    let mut dx = vec![0.0; xs.len()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..rows {
                        let xr = &xs[r * d..(r + 1) * d];
                        let gr = &grad[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = gr.iter().zip(&g).map(|(gv, gg)| gv * gg).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                            dx[r * d + j] = inv / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accum(x, &dx);
                    self.accum(gain, &dgain);
                    self.accum(bias, &dbias);
                }
                Op::Relu { x } => {
                    if self.rg(x) {
                        let dx: Vec<f64> = grad
                            .iter()
                            .zip(&self.nodes[x].data)
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                            .collect();
                        self.accum(x, &dx);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    pad_id,
                } => {
                    if self.rg(logits) {
                        let s = self.nodes[logits].shape.clone();
                        let (t, v) = (s[0], s[1]);
                        let active = targets.iter().filter(|&&x| x != pad_id).count() as f64;
                        let src = self.nodes[logits].data.clone();
                        let mut dl = vec![0.0; t * v];
                        let g0 = grad[0];
                        for r in 0..t {
                            if targets[r] == pad_id {
                                continue;
                            }
                            let row = &src[r * v..(r + 1) * v];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                            for c in 0..v {
                                let p = (row[c] - max).exp() / denom;
                                let hot = if c == targets[r] { 1.0 } else { 0.0 };
                                dl[r * v + c] = g0 * (p - hot) / active;
                            }
                        }
                        self.accum(logits, &dl);
                    }
                }
                Op::Sum { x } => {
                    if self.rg(x) {
                        let dx = vec![grad[0]; self.nodes[x].data.len()];
                        self.accum(x, &dx);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "element {i}: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let m = g.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let out = g.matmul(eye, m).unwrap();
        assert_close(g.data(out), &[1.0, 2.0, 3.0, 4.0], 0.0);
    }

    #[test]
    fn matmul_projector_zeroes_row() {
        let mut g = Graph::new();
        let p = g.constant(vec![1.0, 0.0, 0.0, 0.0], vec![2, 2]).unwrap();
        let x = g.constant(vec![5.0, 7.0], vec![2, 1]).unwrap();
        let out = g.matmul(p, x).unwrap();
        assert_close(g.data(out), &[5.0, 0.0], 0.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = g.constant(vec![0.0; 8], vec![4, 2]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
        let s = g.softmax(x, 0).unwrap();
        assert_close(g.data(s), &[1.0 / 3.0; 3], 1e-12);

        let y = g.constant(vec![1000.0, 0.0], vec![2]).unwrap();
        let sy = g.softmax(y, 0).unwrap();
        let out = g.data(sy);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out[0] > 0.999_999 && out[1] < 1e-6);
    }

    #[test]
    fn layer_norm_constant_collapses_to_bias() {
        let mut g = Graph::new();
        let x = g.constant(vec![3.0; 4], vec![1, 4]).unwrap();
        let gain = g.constant(vec![1.0; 4], vec![4]).unwrap();
        let bias = g.constant(vec![0.0; 4], vec![4]).unwrap();
        let out = g.layer_norm(x, gain, bias).unwrap();
        assert_close(g.data(out), &[0.0; 4], 1e-9);
    }

    #[test]
    fn layer_norm_plus_minus_one() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, -1.0], vec![1, 2]).unwrap();
        let gain = g.constant(vec![1.0, 1.0], vec![2]).unwrap();
        let bias = g.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let out = g.layer_norm(x, gain, bias).unwrap();
        assert_close(g.data(out), &[1.0, -1.0], 1e-4);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::new();
        let logits = g.constant(vec![0.0; 16], vec![2, 8]).unwrap();
        let loss = g.cross_entropy(logits, &[4, 6], 0).unwrap();
        assert_close(g.data(loss), &[8.0f64.ln()], 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_pad_positions() {
        let mut g = Graph::new();
        let mut vals = vec![0.0; 12];
        vals[2] = 5.0; // row 0 prefers token 2
        let logits = g.leaf(vals, vec![3, 4], true).unwrap();
        // rows 1 and 2 are padding (pad_id = 0)
        let loss = g.cross_entropy(logits, &[2, 0, 0], 0).unwrap();
        let expected = {
            let lse: f64 = (0..4)
                .map(|c| ((if c == 2 { 5.0 } else { 0.0 }) - 5.0f64).exp())
                .sum::<f64>()
                .ln()
                + 5.0;
            lse - 5.0
        };
        assert_close(g.data(loss), &[expected], 1e-12);
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        assert!(grad[4..].iter().all(|&v| v == 0.0), "pad rows must not receive gradient");
    }

    #[test]
    fn cross_entropy_all_pad_is_an_error() {
        let mut g = Graph::new();
        let logits = g.constant(vec![0.0; 8], vec![2, 4]).unwrap();
        assert!(matches!(
            g.cross_entropy(logits, &[0, 0], 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut g = Graph::new();
        let table = g.constant(vec![0.0; 8], vec![4, 2]).unwrap();
        assert!(matches!(
            g.embedding_lookup(table, &[1, 4]),
            Err(Error::Index { index: 4, extent: 4 })
        ));
    }

    #[test]
    fn top_k_direct_order_and_ties() {
        let mut g = Graph::new();
        let x = g.constant(vec![3.0, 1.0, 2.0], vec![3]).unwrap();
        let (idx, vals) = g.top_k(x, 2).unwrap();
        assert_eq!(idx, vec![0, 2]);
        assert_close(g.data(vals), &[3.0, 2.0], 0.0);

        let t = g.constant(vec![1.0, 1.0, 1.0], vec![3]).unwrap();
        let (idx, _) = g.top_k(t, 2).unwrap();
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn top_k_rejects_oversized_k() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0], vec![2]).unwrap();
        assert!(matches!(g.top_k(x, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn reuse_accumulates_both_contributions() {
        // y = sum(x + x) => dy/dx = 2 everywhere
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, -2.0, 0.5], vec![3], true).unwrap();
        let two_x = g.add(x, x).unwrap();
        let loss = g.sum(two_x).unwrap();
        g.backward(loss).unwrap();
        assert_close(g.grad(x).unwrap(), &[2.0, 2.0, 2.0], 0.0);
    }

    #[test]
    fn top_k_gradient_only_reaches_selected() {
        let mut g = Graph::new();
        let x = g.leaf(vec![5.0, 1.0, 3.0, 2.0], vec![4], true).unwrap();
        let (_, vals) = g.top_k(x, 2).unwrap();
        let loss = g.sum(vals).unwrap();
        g.backward(loss).unwrap();
        assert_close(g.grad(x).unwrap(), &[1.0, 0.0, 1.0, 0.0], 0.0);
    }

    #[test]
    fn concat_axis1_backward_splits_columns() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true).unwrap();
        let b = g.leaf(vec![5.0, 6.0], vec![2, 1], true).unwrap();
        let cat = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(cat), &[2, 3]);
        assert_close(g.data(cat), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0], 0.0);
        let weights = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3]).unwrap();
        let prod = g.mul(cat, weights).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        assert_close(g.grad(a).unwrap(), &[1.0, 2.0, 4.0, 5.0], 0.0);
        assert_close(g.grad(b).unwrap(), &[3.0, 6.0], 0.0);
    }
}
