//! Autoregressive report generation: greedy and beam search.
//!
//! Textual memory responses are recomputed over the full generated prefix at
//! every step; nothing is cached.

use crate::error::{Error, Result};
use crate::model::{EncoderStates, Model, SourceInput};
use crate::tokens;

/// A finished or truncated generation: content tokens (no BOS/EOS) plus the
/// cumulative log-probability of the emitted path (including EOS when the
/// path ended with one).
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub ended_with_eos: bool,
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Log-probabilities of the next token given a prefix of content tokens.
fn next_token_logprobs(
    model: &Model,
    states: &EncoderStates,
    content: &[usize],
) -> Result<Vec<f64>> {
    let mut prefix = Vec::with_capacity(content.len() + 1);
    prefix.push(tokens::BOS);
    prefix.extend_from_slice(content);
    let logits = model.decode_logits(states, &prefix)?;
    Ok(log_softmax_row(logits.vector(logits.len - 1)))
}

/// Argmax decoding; ties break toward the lowest token id. Stops at EOS or
/// after `max_len` content tokens.
pub fn greedy(model: &Model, source: &SourceInput, max_len: usize) -> Result<Decoded> {
    if max_len == 0 {
        return Err(Error::Argument("max_len must be at least 1".into()));
    }
    let states = model.encode(source)?;
    greedy_from_states(model, &states, max_len)
}

pub fn greedy_from_states(
    model: &Model,
    states: &EncoderStates,
    max_len: usize,
) -> Result<Decoded> {
    let mut content = Vec::new();
    let mut score = 0.0;
    loop {
        let lp = next_token_logprobs(model, states, &content)?;
        let mut best = 0usize;
        for (i, &x) in lp.iter().enumerate() {
            if x > lp[best] {
                best = i;
            }
        }
        score += lp[best];
        if best == tokens::EOS {
            return Ok(Decoded {
                tokens: content,
                score,
                ended_with_eos: true,
            });
        }
        content.push(best);
        if content.len() == max_len {
            return Ok(Decoded {
                tokens: content,
                score,
                ended_with_eos: false,
            });
        }
    }
}

#[derive(Clone, Debug)]
struct Hypothesis {
    content: Vec<usize>,
    log_prob: f64,
}

/// Standard beam search with the EOS-finished set kept aside. Candidates are
/// ordered by score, then lower token id, then lower parent rank, so ties are
/// deterministic.
pub fn beam_search(
    model: &Model,
    source: &SourceInput,
    width: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Decoded> {
    if width == 0 {
        return Err(Error::Argument("beam width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Argument("max_len must be at least 1".into()));
    }
    let states = model.encode(source)?;
    beam_search_from_states(model, &states, width, max_len, alpha)
}

pub fn beam_search_from_states(
    model: &Model,
    states: &EncoderStates,
    width: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Decoded> {
    let mut live = vec![Hypothesis {
        content: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Decoded> = Vec::new();
    let mut stopped_early = false;

    for _ in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new(); // (log_prob, token, parent)
        for (parent, h) in live.iter().enumerate() {
            let lp = next_token_logprobs(model, states, &h.content)?;
            for (tok, &l) in lp.iter().enumerate() {
                candidates.push((h.log_prob + l, tok, parent));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        // An EOS extension finalizes only when it ranks within the step's
        // top `width` candidates (so a width-1 beam reduces to greedy); the
        // next beam takes the best `width` non-EOS extensions.
        for &(log_prob, tok, parent) in candidates.iter().take(width) {
            if tok == tokens::EOS {
                finished.push(Decoded {
                    tokens: live[parent].content.clone(),
                    score: log_prob,
                    ended_with_eos: true,
                });
            }
        }
        let mut next_live = Vec::with_capacity(width);
        for &(log_prob, tok, parent) in &candidates {
            if tok == tokens::EOS {
                continue;
            }
            let mut content = live[parent].content.clone();
            content.push(tok);
            next_live.push(Hypothesis { content, log_prob });
            if next_live.len() == width {
                break;
            }
        }
        live = next_live;

        if finished.len() >= width {
            stopped_early = true;
            break;
        }
        if live.is_empty() {
            break;
        }
    }

    // Final pool: finished hypotheses, plus — when expansion genuinely ran
    // out of length — the unfinished survivors at max_len.
    let mut pool = finished;
    if !stopped_early {
        pool.extend(live.into_iter().map(|h| Decoded {
            tokens: h.content,
            score: h.log_prob,
            ended_with_eos: false,
        }));
    }
    pool.into_iter()
        .max_by(|a, b| {
            score_of(a, alpha)
                .partial_cmp(&score_of(b, alpha))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .ok_or_else(|| Error::Argument("beam search exhausted every hypothesis".into()))
}

fn score_of(d: &Decoded, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return d.score;
    }
    let len = (d.tokens.len() + usize::from(d.ended_with_eos)).max(1) as f64;
    d.score / len.powf(alpha)
}

/// Cumulative log-probability of emitting `content` (plus EOS when
/// `ended_with_eos`) from the given encoder states.
pub fn score_sequence(
    model: &Model,
    states: &EncoderStates,
    content: &[usize],
    ended_with_eos: bool,
) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..content.len() {
        let lp = next_token_logprobs(model, states, &content[..t])?;
        if content[t] >= lp.len() {
            return Err(Error::Index {
                index: content[t],
                extent: lp.len(),
            });
        }
        total += lp[content[t]];
    }
    if ended_with_eos {
        let lp = next_token_logprobs(model, states, content)?;
        total += lp[tokens::EOS];
    }
    Ok(total)
}
