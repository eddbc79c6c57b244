//! Transformer encoder-decoder with selectable memory variants.
//!
//! `base` is the plain encoder-decoder; `mem` gives each modality its own
//! memory module; `cmn` routes both modalities through one shared memory so
//! the matrix becomes the cross-modal medium. Memory responses replace the
//! raw features at the encoder/decoder boundary (optionally residually
//! combined via `residual_response`).

pub mod blocks;
pub mod params;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Features;
use crate::memory::{self, MemoryBinding, QueryTrace};
use crate::tensor::{Graph, TensorId};
use crate::tokens;

use blocks::{feed_forward, multi_head_attention, positional_encoding, residual, Dropout};
use params::{Bound, ParamSet};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain transformer encoder-decoder.
    Base,
    /// Independent per-modality memory modules.
    Mem,
    /// One memory shared by both modalities.
    Cmn,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "base" => Ok(Variant::Base),
            "mem" => Ok(Variant::Mem),
            "cmn" => Ok(Variant::Cmn),
            other => Err(Error::Argument(format!(
                "unknown variant `{other}` (expected base|mem|cmn)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Mem => "mem",
            Variant::Cmn => "cmn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Memory rows N; 0 disables the memory path entirely.
    pub memory_slots: usize,
    /// Queried vectors K per position and head.
    pub memory_topk: usize,
    pub dropout: f64,
    /// Add the raw feature back onto its memory response.
    pub residual_response: bool,
    /// Patch vector width when the source is raw patches; `None` when the
    /// source is pre-extracted features of width `dim`.
    pub patch_dim: Option<usize>,
    pub init_std: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: the full-size configuration shrunk to train on a
    /// CPU in minutes.
    pub fn desk(vocab_size: usize, patch_dim: Option<usize>) -> Self {
        ModelConfig {
            variant: Variant::Cmn,
            layers: 2,
            heads: 4,
            dim: 32,
            ffn_dim: 128,
            vocab_size,
            max_positions: 128,
            memory_slots: 64,
            memory_topk: 8,
            dropout: 0.1,
            residual_response: false,
            patch_dim,
            init_std: 0.02,
        }
    }

    /// Full-size configuration: 3 layers, 8 heads, d=512, N=2048, K=32.
    pub fn full(vocab_size: usize, patch_dim: Option<usize>) -> Self {
        ModelConfig {
            variant: Variant::Cmn,
            layers: 3,
            heads: 8,
            dim: 512,
            ffn_dim: 2048,
            vocab_size,
            max_positions: 512,
            memory_slots: 2048,
            memory_topk: 32,
            dropout: 0.1,
            residual_response: false,
            patch_dim,
            init_std: 0.02,
        }
    }

    /// Tiny configuration for gradient checks and oracles.
    pub fn micro(vocab_size: usize, patch_dim: Option<usize>) -> Self {
        ModelConfig {
            variant: Variant::Cmn,
            layers: 1,
            heads: 2,
            dim: 8,
            ffn_dim: 16,
            vocab_size,
            max_positions: 32,
            memory_slots: 4,
            memory_topk: 2,
            dropout: 0.0,
            residual_response: false,
            patch_dim,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Argument(format!(
                "head count {} must divide model dimension {}",
                self.heads, self.dim
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Argument(format!(
                "vocabulary size {} leaves no room for pad/bos/eos/unk",
                self.vocab_size
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 || self.dim == 0 {
            return Err(Error::Argument(
                "layers, dim and ffn_dim must be positive".into(),
            ));
        }
        if self.max_positions < 2 {
            return Err(Error::Argument("max_positions must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        if self.variant != Variant::Base && self.memory_slots > 0 {
            if self.memory_topk == 0 || self.memory_topk > self.memory_slots {
                return Err(Error::Argument(format!(
                    "memory_topk {} must lie in 1..={}",
                    self.memory_topk, self.memory_slots
                )));
            }
        }
        if self.patch_dim == Some(0) {
            return Err(Error::Argument("patch_dim must be positive".into()));
        }
        Ok(())
    }

    fn memory_active(&self) -> bool {
        self.variant != Variant::Base && self.memory_slots > 0
    }
}

/// Source-side input for one example.
#[derive(Clone, Debug)]
pub enum SourceInput {
    /// Raw patch vectors awaiting the trainable projection.
    Patches(Features),
    /// Pre-extracted features already of model width.
    Features(Features),
}

impl SourceInput {
    pub fn len(&self) -> usize {
        match self {
            SourceInput::Patches(f) | SourceInput::Features(f) => f.len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One training example: source features plus the `BOS ... EOS` token ids.
#[derive(Clone, Debug)]
pub struct Sample {
    pub source: SourceInput,
    pub tokens: Vec<usize>,
}

/// Encoder output `Z` (`S x d`).
#[derive(Clone, Debug)]
pub struct EncoderStates {
    pub states: Features,
}

/// A built forward graph for one batch, ready for `backward`.
pub struct BatchForward {
    pub graph: Graph,
    pub bound: Bound,
    pub loss: TensorId,
}

impl BatchForward {
    pub fn loss_value(&self) -> f64 {
        self.graph.data(self.loss)[0]
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let d = config.dim;
        let dh = d / config.heads;
        let std = config.init_std;

        if let Some(pd) = config.patch_dim {
            p.insert_normal("visual.wp", vec![pd, d], std, &mut rng);
        }
        p.insert_normal("emb.tok", vec![config.vocab_size, d], std, &mut rng);

        if config.memory_active() {
            let memory = |p: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str| {
                p.insert_normal(
                    format!("{prefix}.m"),
                    vec![config.memory_slots, d],
                    std,
                    rng,
                );
                for h in 0..config.heads {
                    p.insert_normal(format!("{prefix}.h{h}.wq"), vec![d, dh], std, rng);
                    p.insert_normal(format!("{prefix}.h{h}.wk"), vec![d, dh], std, rng);
                    p.insert_normal(format!("{prefix}.h{h}.wv"), vec![d, dh], std, rng);
                }
                p.insert_normal(format!("{prefix}.wo"), vec![d, d], std, rng);
            };
            match config.variant {
                Variant::Cmn => memory(&mut p, &mut rng, "mem"),
                Variant::Mem => {
                    memory(&mut p, &mut rng, "memv");
                    memory(&mut p, &mut rng, "memt");
                }
                Variant::Base => unreachable!(),
            }
        }

        let attention = |p: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str| {
            for h in 0..config.heads {
                p.insert_normal(format!("{prefix}.h{h}.wq"), vec![d, dh], std, rng);
                p.insert_normal(format!("{prefix}.h{h}.wk"), vec![d, dh], std, rng);
                p.insert_normal(format!("{prefix}.h{h}.wv"), vec![d, dh], std, rng);
            }
            p.insert_normal(format!("{prefix}.wo"), vec![d, d], std, rng);
        };
        let layer_norm = |p: &mut ParamSet, prefix: &str| {
            p.insert(format!("{prefix}.gain"), vec![d], vec![1.0; d]);
            p.insert(format!("{prefix}.bias"), vec![d], vec![0.0; d]);
        };
        let ffn = |p: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str| {
            p.insert_normal(format!("{prefix}.w1"), vec![d, config.ffn_dim], std, rng);
            p.insert(format!("{prefix}.b1"), vec![config.ffn_dim], vec![0.0; config.ffn_dim]);
            p.insert_normal(format!("{prefix}.w2"), vec![config.ffn_dim, d], std, rng);
            p.insert(format!("{prefix}.b2"), vec![d], vec![0.0; d]);
        };

        for l in 0..config.layers {
            let base = format!("enc.l{l}");
            attention(&mut p, &mut rng, &format!("{base}.attn"));
            layer_norm(&mut p, &format!("{base}.ln1"));
            ffn(&mut p, &mut rng, &format!("{base}.ffn"));
            layer_norm(&mut p, &format!("{base}.ln2"));
        }
        for l in 0..config.layers {
            let base = format!("dec.l{l}");
            attention(&mut p, &mut rng, &format!("{base}.self"));
            layer_norm(&mut p, &format!("{base}.ln1"));
            attention(&mut p, &mut rng, &format!("{base}.cross"));
            layer_norm(&mut p, &format!("{base}.ln2"));
            ffn(&mut p, &mut rng, &format!("{base}.ffn"));
            layer_norm(&mut p, &format!("{base}.ln3"));
        }
        p.insert_normal("out.w", vec![d, config.vocab_size], std, &mut rng);
        p.insert(
            "out.b",
            vec![config.vocab_size],
            vec![0.0; config.vocab_size],
        );

        Ok(Model { config, params: p })
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.total_len()
    }

    /// Scalar parameters contributed by memory modules.
    pub fn memory_overhead(&self) -> usize {
        if !self.config.memory_active() {
            return 0;
        }
        let one = memory::memory_param_count(
            self.config.memory_slots,
            self.config.dim,
            self.config.heads,
        );
        match self.config.variant {
            Variant::Cmn => one,
            Variant::Mem => 2 * one,
            Variant::Base => 0,
        }
    }

    fn memory_binding(&self, bound: &Bound, prefix: &str) -> Result<MemoryBinding> {
        let cfg = &self.config;
        let mut wq = Vec::with_capacity(cfg.heads);
        let mut wk = Vec::with_capacity(cfg.heads);
        let mut wv = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            wq.push(bound.id(&format!("{prefix}.h{h}.wq"))?);
            wk.push(bound.id(&format!("{prefix}.h{h}.wk"))?);
            wv.push(bound.id(&format!("{prefix}.h{h}.wv"))?);
        }
        Ok(MemoryBinding {
            slots: cfg.memory_slots,
            dim: cfg.dim,
            heads: cfg.heads,
            matrix: bound.id(&format!("{prefix}.m"))?,
            wq,
            wk,
            wv,
            wo: bound.id(&format!("{prefix}.wo"))?,
        })
    }

    fn attach_source(
        &self,
        g: &mut Graph,
        bound: &Bound,
        source: &SourceInput,
    ) -> Result<TensorId> {
        if source.is_empty() {
            return Err(Error::Argument("source sequence is empty".into()));
        }
        match source {
            SourceInput::Patches(p) => {
                let expect = self.config.patch_dim.ok_or_else(|| {
                    Error::Consistency(
                        "model was built for pre-extracted features, got raw patches".into(),
                    )
                })?;
                if p.dim != expect {
                    return Err(Error::Dimension {
                        op: "visual_projection",
                        lhs: vec![p.len, p.dim],
                        rhs: vec![expect, self.config.dim],
                    });
                }
                let leaf = p.leaf(g, false)?;
                g.matmul(leaf, bound.id("visual.wp")?)
            }
            SourceInput::Features(f) => {
                if f.dim != self.config.dim {
                    return Err(Error::Dimension {
                        op: "source_features",
                        lhs: vec![f.len, f.dim],
                        rhs: vec![f.len, self.config.dim],
                    });
                }
                f.leaf(g, false)
            }
        }
    }

    /// Memory pass for one modality; identity when the path is disabled.
    fn attach_memory(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: TensorId,
        textual: bool,
    ) -> Result<(TensorId, Option<QueryTrace>)> {
        if !self.config.memory_active() {
            return Ok((x, None));
        }
        let prefix = match (self.config.variant, textual) {
            (Variant::Cmn, _) => "mem",
            (Variant::Mem, false) => "memv",
            (Variant::Mem, true) => "memt",
            (Variant::Base, _) => unreachable!(),
        };
        let binding = self.memory_binding(bound, prefix)?;
        let (resp, trace) =
            memory::attach_query_respond(g, x, &binding, self.config.memory_topk)?;
        let out = if self.config.residual_response {
            g.add(x, resp)?
        } else {
            resp
        };
        Ok((out, Some(trace)))
    }

    fn attach_visual_pipeline(
        &self,
        g: &mut Graph,
        bound: &Bound,
        source: &SourceInput,
        drop: &mut Dropout<'_>,
    ) -> Result<(TensorId, Option<QueryTrace>)> {
        let src = self.attach_source(g, bound, source)?;
        let (x, trace) = self.attach_memory(g, bound, src, false)?;
        let x = drop.apply(g, x)?;
        Ok((x, trace))
    }

    /// Token embeddings (+ sinusoidal positions) routed through the textual
    /// memory path.
    fn attach_textual_pipeline(
        &self,
        g: &mut Graph,
        bound: &Bound,
        prefix_tokens: &[usize],
        drop: &mut Dropout<'_>,
    ) -> Result<(TensorId, Option<QueryTrace>)> {
        let t = prefix_tokens.len();
        if t == 0 {
            return Err(Error::Argument("empty token prefix".into()));
        }
        if t > self.config.max_positions {
            return Err(Error::Argument(format!(
                "sequence length {t} exceeds max positions {}",
                self.config.max_positions
            )));
        }
        let d = self.config.dim;
        let table = bound.id("emb.tok")?;
        let emb = g.embedding_lookup(table, prefix_tokens)?;
        let emb = g.scale(emb, (d as f64).sqrt())?;
        let pe = g.constant(positional_encoding(t, d), vec![t, d])?;
        let x = g.add(emb, pe)?;
        let (x, trace) = self.attach_memory(g, bound, x, true)?;
        let x = drop.apply(g, x)?;
        Ok((x, trace))
    }

    fn attach_encoder(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: TensorId,
        drop: &mut Dropout<'_>,
    ) -> Result<TensorId> {
        let mut h = x;
        for l in 0..self.config.layers {
            let base = format!("enc.l{l}");
            let attn = multi_head_attention(
                g,
                bound,
                &format!("{base}.attn"),
                h,
                h,
                self.config.heads,
                false,
            )?;
            h = residual(g, bound, &format!("{base}.ln1"), h, attn, drop)?;
            let ff = feed_forward(g, bound, &format!("{base}.ffn"), h)?;
            h = residual(g, bound, &format!("{base}.ln2"), h, ff, drop)?;
        }
        Ok(h)
    }

    fn attach_decoder(
        &self,
        g: &mut Graph,
        bound: &Bound,
        y: TensorId,
        states: TensorId,
        drop: &mut Dropout<'_>,
    ) -> Result<TensorId> {
        let mut h = y;
        for l in 0..self.config.layers {
            let base = format!("dec.l{l}");
            let self_attn = multi_head_attention(
                g,
                bound,
                &format!("{base}.self"),
                h,
                h,
                self.config.heads,
                true,
            )?;
            h = residual(g, bound, &format!("{base}.ln1"), h, self_attn, drop)?;
            let cross = multi_head_attention(
                g,
                bound,
                &format!("{base}.cross"),
                h,
                states,
                self.config.heads,
                false,
            )?;
            h = residual(g, bound, &format!("{base}.ln2"), h, cross, drop)?;
            let ff = feed_forward(g, bound, &format!("{base}.ffn"), h)?;
            h = residual(g, bound, &format!("{base}.ln3"), h, ff, drop)?;
        }
        Ok(h)
    }

    fn attach_logits(&self, g: &mut Graph, bound: &Bound, hidden: TensorId) -> Result<TensorId> {
        let w = bound.id("out.w")?;
        let b = bound.id("out.b")?;
        let logits = g.matmul(hidden, w)?;
        g.add_row(logits, b)
    }

    /// Teacher-forced forward for one sample: loss and `[T x V]` logits over
    /// the shifted targets.
    pub fn attach_teacher_forced(
        &self,
        g: &mut Graph,
        bound: &Bound,
        sample: &Sample,
        drop: &mut Dropout<'_>,
    ) -> Result<(TensorId, TensorId)> {
        let toks = &sample.tokens;
        if toks.len() < 2 || toks[0] != tokens::BOS || *toks.last().unwrap() != tokens::EOS {
            return Err(Error::Argument(format!(
                "report tokens must be BOS .. EOS with at least two entries, got {} tokens",
                toks.len()
            )));
        }
        let (enc_in, _) = self.attach_visual_pipeline(g, bound, &sample.source, drop)?;
        let states = self.attach_encoder(g, bound, enc_in, drop)?;
        let input = &toks[..toks.len() - 1];
        let targets = &toks[1..];
        let (dec_in, _) = self.attach_textual_pipeline(g, bound, input, drop)?;
        let hidden = self.attach_decoder(g, bound, dec_in, states, drop)?;
        let logits = self.attach_logits(g, bound, hidden)?;
        let loss = g.cross_entropy(logits, targets, tokens::PAD)?;
        Ok((loss, logits))
    }

    /// Build the mean teacher-forced loss over a batch, parameters bound
    /// trainably. Pass an RNG to enable dropout.
    pub fn batch_forward(
        &self,
        samples: &[&Sample],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BatchForward> {
        if samples.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, true)?;
        let mut drop = Dropout {
            rate: self.config.dropout,
            rng: dropout_rng,
        };
        let mut losses = Vec::with_capacity(samples.len());
        for s in samples {
            let (loss, _) = self.attach_teacher_forced(&mut g, &bound, s, &mut drop)?;
            losses.push(loss);
        }
        let loss = g.mean_of(&losses)?;
        Ok(BatchForward { graph: g, bound, loss })
    }

    /// Evaluation-mode teacher-forced loss.
    pub fn forward_teacher_forced(&self, sample: &Sample) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false)?;
        let (loss, _) = self.attach_teacher_forced(&mut g, &bound, sample, &mut Dropout::off())?;
        Ok(g.data(loss)[0])
    }

    /// Evaluation-mode logits over the shifted targets, `[T x V]`.
    pub fn teacher_logits(&self, sample: &Sample) -> Result<Features> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false)?;
        let (_, logits) =
            self.attach_teacher_forced(&mut g, &bound, sample, &mut Dropout::off())?;
        Features::from_graph(&g, logits)
    }

    /// Run the visual pipeline and encoder; also returns the visual memory
    /// trace when the memory path is active.
    pub fn encode_traced(
        &self,
        source: &SourceInput,
    ) -> Result<(EncoderStates, Option<QueryTrace>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false)?;
        let (x, trace) =
            self.attach_visual_pipeline(&mut g, &bound, source, &mut Dropout::off())?;
        let states = self.attach_encoder(&mut g, &bound, x, &mut Dropout::off())?;
        Ok((
            EncoderStates {
                states: Features::from_graph(&g, states)?,
            },
            trace,
        ))
    }

    pub fn encode(&self, source: &SourceInput) -> Result<EncoderStates> {
        Ok(self.encode_traced(source)?.0)
    }

    /// Logits `[t x V]` for a generation prefix (`BOS y_1 .. y_{t-1}`),
    /// recomputing textual memory responses over the whole prefix.
    pub fn decode_logits(&self, states: &EncoderStates, prefix: &[usize]) -> Result<Features> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false)?;
        let (y, _) = self.attach_textual_pipeline(&mut g, &bound, prefix, &mut Dropout::off())?;
        let s = states.states.leaf(&mut g, false)?;
        let hidden = self.attach_decoder(&mut g, &bound, y, s, &mut Dropout::off())?;
        let logits = self.attach_logits(&mut g, &bound, hidden)?;
        Features::from_graph(&g, logits)
    }

    /// Textual-side memory trace for a token sequence (None when the memory
    /// path is disabled).
    pub fn textual_trace(&self, tokens: &[usize]) -> Result<Option<QueryTrace>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false)?;
        let (_, trace) =
            self.attach_textual_pipeline(&mut g, &bound, tokens, &mut Dropout::off())?;
        Ok(trace)
    }
}
