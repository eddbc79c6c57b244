//! Corpus-level generation metrics: BLEU-1..4, ROUGE-L, and micro-averaged
//! precision/recall/F1 over label sets, plus the keyword labeler that stands
//! in for an external clinical labeler on the synthetic corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};

/// Shared tokenizer: lowercase, split on whitespace and punctuation
/// (any non-alphanumeric byte separates tokens).
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// One aligned candidate/reference pair.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub id: String,
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with modified n-gram precision and the brevity penalty
/// `e^(1 - r/c)` for short candidates. No smoothing: a zero precision at any
/// order zeroes the score for that order and above. Returns BL-1..BL-n.
pub fn bleu(pairs: &[EvalPair], n_max: usize) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Argument("BLEU over an empty corpus".into()));
    }
    if n_max == 0 {
        return Err(Error::Argument("BLEU needs n_max >= 1".into()));
    }
    let mut matched = vec![0usize; n_max];
    let mut total = vec![0usize; n_max];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for p in pairs {
        cand_len += p.candidate.len();
        ref_len += p.reference.len();
        for n in 1..=n_max {
            let cand = ngram_counts(&p.candidate, n);
            let refs = ngram_counts(&p.reference, n);
            for (gram, &c) in &cand {
                let r = refs.get(gram).copied().unwrap_or(0);
                matched[n - 1] += c.min(r);
                total[n - 1] += c;
            }
        }
    }
    let brevity = if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut scores = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let mut log_sum = 0.0;
        let mut zero = false;
        for k in 0..n {
            if matched[k] == 0 || total[k] == 0 {
                zero = true;
                break;
            }
            log_sum += (matched[k] as f64 / total[k] as f64).ln();
        }
        scores.push(if zero {
            0.0
        } else {
            brevity * (log_sum / n as f64).exp()
        });
    }
    Ok(scores)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L: LCS-based F-measure (beta = 1.2) per pair, averaged over the
/// corpus. A pair with an empty candidate contributes 0.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("ROUGE-L over an empty corpus".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        if p.candidate.is_empty() || p.reference.is_empty() {
            continue;
        }
        let lcs = lcs_len(&p.candidate, &p.reference) as f64;
        if lcs == 0.0 {
            continue;
        }
        let prec = lcs / p.candidate.len() as f64;
        let rec = lcs / p.reference.len() as f64;
        let b2 = ROUGE_BETA * ROUGE_BETA;
        total += (1.0 + b2) * prec * rec / (rec + b2 * prec);
    }
    Ok(total / pairs.len() as f64)
}

/// Micro-averaged label precision/recall/F1 with the raw counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

/// Compare predicted and gold label sets per report id, micro-averaged over
/// every (id, category) decision. Both maps must cover the same ids and every
/// category must belong to `universe`.
pub fn label_prf(
    predicted: &BTreeMap<String, BTreeSet<String>>,
    gold: &BTreeMap<String, BTreeSet<String>>,
    universe: &BTreeSet<String>,
) -> Result<LabelScores> {
    if predicted.len() != gold.len() || predicted.keys().any(|k| !gold.contains_key(k)) {
        return Err(Error::Argument(
            "predicted and gold label sets cover different report ids".into(),
        ));
    }
    for (name, sets) in [("predicted", predicted), ("gold", gold)] {
        for (id, set) in sets {
            if let Some(cat) = set.iter().find(|c| !universe.contains(*c)) {
                return Err(Error::Argument(format!(
                    "{name} labels for `{id}` contain unknown category `{cat}`"
                )));
            }
        }
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (id, pred) in predicted {
        let gold_set = &gold[id];
        tp += pred.intersection(gold_set).count();
        fp += pred.difference(gold_set).count();
        fn_ += gold_set.difference(pred).count();
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(LabelScores {
        precision,
        recall,
        f1,
        true_pos: tp,
        false_pos: fp,
        false_neg: fn_,
    })
}

/// Keyword rule: a trigger phrase implies a category unless a negation cue
/// appears within the preceding window.
#[derive(Clone, Debug)]
pub struct LabelRule {
    pub trigger: Vec<String>,
    pub category: String,
}

#[derive(Clone, Debug)]
pub struct RuleTable {
    pub rules: Vec<LabelRule>,
    pub negations: BTreeSet<String>,
    /// Tokens before the trigger that a negation cue can occupy.
    pub window: usize,
}

impl RuleTable {
    /// Every category the table can emit.
    pub fn universe(&self) -> BTreeSet<String> {
        self.rules.iter().map(|r| r.category.clone()).collect()
    }
}

/// Apply the rule table to a tokenized report.
pub fn rule_labeler(tokens: &[String], table: &RuleTable) -> BTreeSet<String> {
    let mut labels = BTreeSet::new();
    for rule in &table.rules {
        let t = &rule.trigger;
        if t.is_empty() || tokens.len() < t.len() {
            continue;
        }
        for start in 0..=tokens.len() - t.len() {
            if tokens[start..start + t.len()] != t[..] {
                continue;
            }
            let from = start.saturating_sub(table.window);
            let negated = tokens[from..start]
                .iter()
                .any(|tok| table.negations.contains(tok));
            if !negated {
                labels.insert(rule.category.clone());
                break;
            }
        }
    }
    labels
}
