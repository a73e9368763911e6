use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::model::forward_cached;
use super::params::DecoderParams;
use super::vocab::{Vocabulary, BOS, EOS, PAD};
use super::DecoderError;
use crate::toyclap::HiddenStateSeq;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Strategy {
    /// Argmax at every step; ties go to the lowest token id.
    #[default]
    Greedy,
    /// Beam search ranked by log-probability per generated token.
    Beam { width: usize },
}

fn last_logits(
    params: &DecoderParams,
    ids: &[u32],
    hidden: &HiddenStateSeq,
) -> Result<Vec<f64>, DecoderError> {
    let (logits, _) = forward_cached(params, ids, Some(hidden))?;
    let mut row = logits.row(ids.len() - 1).to_vec();
    row[BOS as usize] = f64::NEG_INFINITY;
    row[PAD as usize] = f64::NEG_INFINITY;
    Ok(row)
}

fn greedy(
    params: &DecoderParams,
    mut ids: Vec<u32>,
    hidden: &HiddenStateSeq,
    max_new: usize,
) -> Result<Vec<u32>, DecoderError> {
    let start = ids.len();
    for _ in 0..max_new {
        if ids.len() > params.config.max_len {
            break;
        }
        let row = last_logits(params, &ids, hidden)?;
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best as u32 == EOS {
            break;
        }
        ids.push(best as u32);
        if ids.len() > params.config.max_len {
            break;
        }
    }
    Ok(ids[start..].to_vec())
}

#[derive(Clone)]
struct Beam {
    ids: Vec<u32>,
    logp: f64,
    generated: usize,
    done: bool,
}

impl Beam {
    fn score(&self) -> f64 {
        if self.generated == 0 {
            0.0
        } else {
            self.logp / self.generated as f64
        }
    }
}

fn by_score(a: &Beam, b: &Beam) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.ids.cmp(&b.ids))
}

fn beam(
    params: &DecoderParams,
    ids: Vec<u32>,
    hidden: &HiddenStateSeq,
    max_new: usize,
    width: usize,
) -> Result<Vec<u32>, DecoderError> {
    let width = width.max(1);
    let start = ids.len();
    let mut beams = vec![Beam {
        ids,
        logp: 0.0,
        generated: 0,
        done: false,
    }];
    for _ in 0..max_new {
        if beams.iter().all(|b| b.done) {
            break;
        }
        let mut candidates = Vec::new();
        for b in &beams {
            if b.done || b.ids.len() > params.config.max_len {
                candidates.push(Beam { done: true, ..b.clone() });
                continue;
            }
            let row = last_logits(params, &b.ids, hidden)?;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mut ranked: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(i, &v)| (i, v - lse))
                .collect();
            ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            for &(tok, lp) in ranked.iter().take(width) {
                let mut next = b.ids.clone();
                next.push(tok as u32);
                candidates.push(Beam {
                    ids: next,
                    logp: b.logp + lp,
                    generated: b.generated + 1,
                    done: tok as u32 == EOS,
                });
            }
        }
        candidates.sort_by(by_score);
        candidates.truncate(width);
        beams = candidates;
    }
    beams.sort_by(by_score);
    let best = &beams[0];
    Ok(best.ids[start..]
        .iter()
        .copied()
        .filter(|&t| t != EOS)
        .collect())
}

/// Decodes a caption after `BOS prompt`. Stops at EOS, after `max_new`
/// tokens, or when the context is full.
pub fn generate(
    params: &DecoderParams,
    vocab: &Vocabulary,
    prompt: &str,
    hidden: &HiddenStateSeq,
    max_new: usize,
    strategy: Strategy,
) -> Result<String, DecoderError> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(prompt));
    if ids.len() > params.config.max_len {
        return Err(DecoderError::TooLong {
            len: ids.len(),
            max: params.config.max_len,
        });
    }
    if max_new == 0 {
        return Ok(String::new());
    }
    let out = match strategy {
        Strategy::Greedy => greedy(params, ids, hidden, max_new)?,
        Strategy::Beam { width } => beam(params, ids, hidden, max_new, width)?,
    };
    Ok(vocab.decode(&out))
}
