//! Cross-modal memory network for image-to-text generation.
//!
//! The crate bundles everything needed to train and run the model on a
//! desk-scale synthetic corpus: a small reverse-mode autodiff tensor engine,
//! the shared cross-modal memory (querying + responding), a transformer
//! encoder-decoder with selectable variants, an Adam trainer with a two-group
//! learning-rate schedule, greedy/beam decoding, text-generation metrics, and
//! a deterministic corpus generator.

pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod features;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod visual;

pub use error::{Error, Result};
pub use features::Features;
pub use memory::{MemoryHeads, MemoryMatrix, QueryTrace};
pub use model::{Model, ModelConfig, Variant};
pub use tensor::{Graph, TensorId};

/// Reserved vocabulary slots shared by every tokenized report.
pub mod tokens {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;
}
