//! Shared cross-modal memory: a trainable matrix whose rows are queried by
//! both visual and textual features.
//!
//! Querying projects an input feature and every memory row into a common
//! per-head subspace, scores rows by scaled dot product, keeps the top-K, and
//! softmax-normalizes the K selected distances into weights. Responding
//! value-transforms the selected rows, takes their weighted sum per head,
//! concatenates the heads, and applies the output projection — the response
//! replaces the input feature as the representation handed to the
//! encoder/decoder.

use crate::error::{Error, Result};
use crate::features::Features;
use crate::tensor::{Graph, TensorId};

/// The `N x d` matrix of trainable memory vectors.
#[derive(Clone, Debug)]
pub struct MemoryMatrix {
    pub slots: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl MemoryMatrix {
    pub fn new(slots: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != slots * dim {
            return Err(Error::Argument(format!(
                "memory data of length {} does not fill {slots}x{dim}",
                data.len()
            )));
        }
        Ok(MemoryMatrix { slots, dim, data })
    }
}

/// Per-head query/key/value projections plus the output projection that
/// recombines head responses back to dimension `d`.
#[derive(Clone, Debug)]
pub struct MemoryHeads {
    pub heads: usize,
    pub dim: usize,
    /// `d x d_h` per head.
    pub wq: Vec<Vec<f64>>,
    pub wk: Vec<Vec<f64>>,
    pub wv: Vec<Vec<f64>>,
    /// `d x d`.
    pub wo: Vec<f64>,
}

impl MemoryHeads {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Argument(format!(
                "head count {} must divide the model dimension {}",
                self.heads, self.dim
            )));
        }
        let dh = self.head_dim();
        for set in [&self.wq, &self.wk, &self.wv] {
            if set.len() != self.heads || set.iter().any(|w| w.len() != self.dim * dh) {
                return Err(Error::Argument(
                    "per-head projections must each be d x d_h".into(),
                ));
            }
        }
        if self.wo.len() != self.dim * self.dim {
            return Err(Error::Argument("output projection must be d x d".into()));
        }
        Ok(())
    }
}

/// Which memory rows each position/head selected and with what weights.
#[derive(Clone, Debug, Default)]
pub struct QueryTrace {
    pub positions: usize,
    pub heads: usize,
    pub entries: Vec<TraceEntry>,
}

#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub position: usize,
    pub head: usize,
    /// Selected memory rows, in descending-distance order.
    pub indices: Vec<usize>,
    /// Scaled dot-product distances of the selected rows.
    pub distances: Vec<f64>,
    /// Softmax weights over the selected distances; they sum to 1.
    pub weights: Vec<f64>,
}

impl QueryTrace {
    pub fn entry(&self, position: usize, head: usize) -> &TraceEntry {
        &self.entries[position * self.heads + head]
    }

    /// CSV rows `(modality, position, head, rank, memory_index, weight)`.
    pub fn csv_rows(&self, modality: &str) -> Vec<String> {
        let mut rows = Vec::new();
        for e in &self.entries {
            for (rank, (&idx, &w)) in e.indices.iter().zip(&e.weights).enumerate() {
                rows.push(format!(
                    "{modality},{},{},{rank},{idx},{w}",
                    e.position, e.head
                ));
            }
        }
        rows
    }
}

/// Graph handles for one memory module's parameters.
pub struct MemoryBinding {
    pub slots: usize,
    pub dim: usize,
    pub heads: usize,
    pub matrix: TensorId,
    pub wq: Vec<TensorId>,
    pub wk: Vec<TensorId>,
    pub wv: Vec<TensorId>,
    pub wo: TensorId,
}

impl MemoryBinding {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Bind owned memory parameters into a graph.
    pub fn from_parts(
        g: &mut Graph,
        mem: &MemoryMatrix,
        heads: &MemoryHeads,
        requires_grad: bool,
    ) -> Result<Self> {
        heads.validate()?;
        if mem.dim != heads.dim {
            return Err(Error::Dimension {
                op: "memory_binding",
                lhs: vec![mem.slots, mem.dim],
                rhs: vec![heads.dim, heads.dim],
            });
        }
        let dh = heads.head_dim();
        let matrix = g.leaf(mem.data.clone(), vec![mem.slots, mem.dim], requires_grad)?;
        let mut bind = |set: &Vec<Vec<f64>>| -> Result<Vec<TensorId>> {
            set.iter()
                .map(|w| g.leaf(w.clone(), vec![heads.dim, dh], requires_grad))
                .collect()
        };
        let wq = bind(&heads.wq)?;
        let wk = bind(&heads.wk)?;
        let wv = bind(&heads.wv)?;
        let wo = g.leaf(heads.wo.clone(), vec![heads.dim, heads.dim], requires_grad)?;
        Ok(MemoryBinding {
            slots: mem.slots,
            dim: mem.dim,
            heads: heads.heads,
            matrix,
            wq,
            wk,
            wv,
            wo,
        })
    }
}

/// Full differentiable querying + responding for a feature sequence.
///
/// Returns the `L x d` response tensor and the trace of what was selected.
/// Top-K selection indices are constants on the tape; gradients flow through
/// the selected distances, weights, memory rows, and all projections.
pub fn attach_query_respond(
    g: &mut Graph,
    features: TensorId,
    bind: &MemoryBinding,
    k: usize,
) -> Result<(TensorId, QueryTrace)> {
    let fshape = g.shape(features).to_vec();
    if fshape.len() != 2 || fshape[1] != bind.dim {
        return Err(Error::Dimension {
            op: "memory_query",
            lhs: fshape,
            rhs: vec![bind.slots, bind.dim],
        });
    }
    if k == 0 || k > bind.slots {
        return Err(Error::Argument(format!(
            "queried vector count k={k} must be in 1..={}",
            bind.slots
        )));
    }
    let len = fshape[0];
    let dh = bind.head_dim();
    let inv_scale = 1.0 / (dh as f64).sqrt();

    let mut trace = QueryTrace {
        positions: len,
        heads: bind.heads,
        entries: vec![
            TraceEntry {
                position: 0,
                head: 0,
                indices: Vec::new(),
                distances: Vec::new(),
                weights: Vec::new(),
            };
            len * bind.heads
        ],
    };
    let mut head_responses = Vec::with_capacity(bind.heads);
    for h in 0..bind.heads {
        let q = g.matmul(features, bind.wq[h])?; // L x dh
        let keys = g.matmul(bind.matrix, bind.wk[h])?; // N x dh
        let values = g.matmul(bind.matrix, bind.wv[h])?; // N x dh
        let keys_t = g.transpose(keys)?;
        let scores_all = g.matmul(q, keys_t)?; // L x N
        let scores = g.scale(scores_all, inv_scale)?;
        let mut rows = Vec::with_capacity(len);
        for p in 0..len {
            let srow = g.row(scores, p)?;
            let (indices, selected) = g.top_k(srow, k)?;
            let weights = g.softmax(selected, 0)?;
            {
                let e = &mut trace.entries[p * bind.heads + h];
                e.position = p;
                e.head = h;
                e.indices = indices.clone();
                e.distances = g.data(selected).to_vec();
                e.weights = g.data(weights).to_vec();
            }
            let picked = g.gather_rows(values, &indices)?; // K x dh
            let wrow = g.reshape(weights, vec![1, k])?;
            rows.push(g.matmul(wrow, picked)?); // 1 x dh
        }
        head_responses.push(g.concat(&rows, 0)?); // L x dh
    }
    let joined = g.concat(&head_responses, 1)?; // L x d
    let out = g.matmul(joined, bind.wo)?;
    Ok((out, trace))
}

/// Responding with a previously computed trace: indices and weights are
/// taken from the trace verbatim.
pub fn attach_respond_with_trace(
    g: &mut Graph,
    trace: &QueryTrace,
    bind: &MemoryBinding,
) -> Result<TensorId> {
    if trace.heads != bind.heads {
        return Err(Error::Consistency(format!(
            "trace carries {} heads but the memory has {}",
            trace.heads, bind.heads
        )));
    }
    for e in &trace.entries {
        if let Some(&bad) = e.indices.iter().find(|&&i| i >= bind.slots) {
            return Err(Error::Consistency(format!(
                "trace references memory row {bad} but the matrix has {} rows",
                bind.slots
            )));
        }
    }
    let len = trace.positions;
    let mut head_responses = Vec::with_capacity(bind.heads);
    for h in 0..bind.heads {
        let values = g.matmul(bind.matrix, bind.wv[h])?;
        let mut rows = Vec::with_capacity(len);
        for p in 0..len {
            let e = trace.entry(p, h);
            let picked = g.gather_rows(values, &e.indices)?;
            let wrow = g.constant(e.weights.clone(), vec![1, e.weights.len()])?;
            rows.push(g.matmul(wrow, picked)?);
        }
        head_responses.push(g.concat(&rows, 0)?);
    }
    let joined = g.concat(&head_responses, 1)?;
    g.matmul(joined, bind.wo)
}

/// Querying alone: selected rows, distances, and normalized weights.
pub fn query(
    features: &Features,
    mem: &MemoryMatrix,
    heads: &MemoryHeads,
    k: usize,
) -> Result<QueryTrace> {
    let (_, trace) = query_and_respond(features, mem, heads, k)?;
    Ok(trace)
}

/// Responding alone, driven by an existing trace.
pub fn respond(trace: &QueryTrace, mem: &MemoryMatrix, heads: &MemoryHeads) -> Result<Features> {
    let mut g = Graph::new();
    let bind = MemoryBinding::from_parts(&mut g, mem, heads, false)?;
    let out = attach_respond_with_trace(&mut g, trace, &bind)?;
    Features::from_graph(&g, out)
}

/// One forward pass of querying followed by responding.
pub fn query_and_respond(
    features: &Features,
    mem: &MemoryMatrix,
    heads: &MemoryHeads,
    k: usize,
) -> Result<(Features, QueryTrace)> {
    let mut g = Graph::new();
    let bind = MemoryBinding::from_parts(&mut g, mem, heads, false)?;
    let fid = features.leaf(&mut g, false)?;
    let (out, trace) = attach_query_respond(&mut g, fid, &bind, k)?;
    Ok((Features::from_graph(&g, out)?, trace))
}

/// Trainable parameter count of one memory module:
/// `N*d` matrix + `3*H*d*d_h` projections + `d*d` output projection.
pub fn memory_param_count(slots: usize, dim: usize, heads: usize) -> usize {
    let dh = dim / heads;
    slots * dim + 3 * heads * dim * dh + dim * dim
}

/// Memory parameter count and its percentage of a supplied total.
pub fn memory_param_share(slots: usize, dim: usize, heads: usize, total: usize) -> (usize, f64) {
    let count = memory_param_count(slots, dim, heads);
    let pct = if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    };
    (count, pct)
}
