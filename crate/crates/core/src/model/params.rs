//! Named, ordered parameter storage shared by the model and optimizer.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::io::snap_f32;
use crate::tensor::{Graph, TensorId};

#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Insertion-ordered map of named parameters. Parameter values are kept
/// exactly representable in `f32` so checkpoints round-trip bit-for-bit.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        debug_assert!(!self.entries.contains_key(&name), "duplicate param {name}");
        self.entries.insert(name, Param { shape, data });
    }

    /// Gaussian init with the given standard deviation, snapped to `f32`.
    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                snap_f32(z * std)
            })
            .collect();
        self.insert(name, shape, data);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.values().map(Param::numel).sum()
    }

    /// Bind every parameter into a graph.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let mut ids = IndexMap::with_capacity(self.entries.len());
        for (name, p) in &self.entries {
            let id = g.leaf(p.data.clone(), p.shape.clone(), trainable)?;
            ids.insert(name.clone(), id);
        }
        Ok(Bound { ids })
    }
}

/// Graph handles for one binding of a [`ParamSet`].
pub struct Bound {
    ids: IndexMap<String, TensorId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Consistency(format!("parameter `{name}` is not bound")))
    }

    /// Gradients accumulated by a backward pass, keyed by parameter name.
    /// Parameters that did not participate in the loss are omitted.
    pub fn gradients(&self, g: &Graph) -> IndexMap<String, Vec<f64>> {
        let mut out = IndexMap::new();
        for (name, &id) in &self.ids {
            if let Some(grad) = g.grad(id) {
                out.insert(name.clone(), grad.to_vec());
            }
        }
        out
    }
}
