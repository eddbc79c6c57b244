//! Ordered sequences of equal-dimension feature vectors.

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};

/// A row-major `len x dim` block of feature vectors: visual patch features,
/// token embeddings, memory responses, encoder states.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(len: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != len * dim {
            return Err(Error::Argument(format!(
                "feature data of length {} does not fill {len}x{dim}",
                data.len()
            )));
        }
        Ok(Features { len, dim, data })
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        Features {
            len,
            dim,
            data: vec![0.0; len * dim],
        }
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Insert as a graph leaf.
    pub fn leaf(&self, g: &mut Graph, requires_grad: bool) -> Result<TensorId> {
        g.leaf(self.data.clone(), vec![self.len, self.dim], requires_grad)
    }

    /// Copy a rank-2 graph tensor back out.
    pub fn from_graph(g: &Graph, id: TensorId) -> Result<Self> {
        let shape = g.shape(id);
        if shape.len() != 2 {
            return Err(Error::Argument(format!(
                "expected a rank-2 tensor, got shape {:?}",
                shape
            )));
        }
        Features::new(shape[0], shape[1], g.data(id).to_vec())
    }
}
