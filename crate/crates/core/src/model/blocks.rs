//! Transformer building blocks assembled from tensor-engine primitives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, TensorId};

use super::params::Bound;

/// Additive mask value for disallowed attention positions. Large and finite:
/// `exp` underflows to exactly zero after max-subtraction, so causality is
/// bit-exact without infinities in the tape.
const MASK_VALUE: f64 = -1e30;

/// Inverted-dropout state; `None` rng means evaluation (identity).
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let rng = match (&mut self.rng, self.rate > 0.0) {
            (Some(rng), true) => rng,
            _ => return Ok(x),
        };
        let keep = 1.0 - self.rate;
        let n = g.tensor(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let shape = g.shape(x).to_vec();
        let m = g.constant(mask, shape)?;
        g.mul(x, m)
    }
}

/// Scaled dot-product multi-head attention.
///
/// Queries come from `q_in` and keys/values from `kv_in`; with `causal` set,
/// query position `i` only sees key positions `<= i`. Parameter names are
/// `{prefix}.h{h}.wq|wk|wv` and `{prefix}.wo`.
pub fn multi_head_attention(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    q_in: TensorId,
    kv_in: TensorId,
    heads: usize,
    causal: bool,
) -> Result<TensorId> {
    let lq = g.shape(q_in)[0];
    let lk = g.shape(kv_in)[0];
    let mask = if causal {
        let mut m = vec![0.0; lq * lk];
        for i in 0..lq {
            for j in 0..lk {
                if j > i {
                    m[i * lk + j] = MASK_VALUE;
                }
            }
        }
        Some(g.constant(m, vec![lq, lk])?)
    } else {
        None
    };
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = bound.id(&format!("{prefix}.h{h}.wq"))?;
        let wk = bound.id(&format!("{prefix}.h{h}.wk"))?;
        let wv = bound.id(&format!("{prefix}.h{h}.wv"))?;
        let q = g.matmul(q_in, wq)?;
        let k = g.matmul(kv_in, wk)?;
        let v = g.matmul(kv_in, wv)?;
        let dh = g.shape(q)[1];
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let attn = g.softmax(scores, 1)?;
        outputs.push(g.matmul(attn, v)?);
    }
    let joined = g.concat(&outputs, 1)?;
    let wo = bound.id(&format!("{prefix}.wo"))?;
    g.matmul(joined, wo)
}

/// Position-wise feed-forward: `relu(x w1 + b1) w2 + b2`.
pub fn feed_forward(g: &mut Graph, bound: &Bound, prefix: &str, x: TensorId) -> Result<TensorId> {
    let w1 = bound.id(&format!("{prefix}.w1"))?;
    let b1 = bound.id(&format!("{prefix}.b1"))?;
    let w2 = bound.id(&format!("{prefix}.w2"))?;
    let b2 = bound.id(&format!("{prefix}.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, w2)?;
    g.add_row(h, b2)
}

/// Layer norm with named gain/bias.
pub fn layer_norm(g: &mut Graph, bound: &Bound, prefix: &str, x: TensorId) -> Result<TensorId> {
    let gain = bound.id(&format!("{prefix}.gain"))?;
    let bias = bound.id(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Post-norm residual sublayer: `layer_norm(x + dropout(sub(x)))`.
pub fn residual(
    g: &mut Graph,
    bound: &Bound,
    ln_prefix: &str,
    x: TensorId,
    sub_out: TensorId,
    drop: &mut Dropout<'_>,
) -> Result<TensorId> {
    let dropped = drop.apply(g, sub_out)?;
    let sum = g.add(x, dropped)?;
    layer_norm(g, bound, ln_prefix, sum)
}

/// Sinusoidal positional encodings for `len` positions of width `dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let exponent = 2.0 * (i / 2) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
