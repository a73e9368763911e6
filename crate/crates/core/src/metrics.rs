//! Corpus-level caption metrics: BLEU-1..4, ROUGE-L and CIDEr-D.
//!
//! All metrics share the [`crate::text::words`] tokenizer. CIDEr-D skips
//! stemming, so absolute values are not comparable with leaderboard numbers.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::text;

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
const CIDER_MAX_N: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no pairs to evaluate")]
    NoPairs,
    #[error("pair {0} has no references")]
    NoReferences(usize),
    #[error("idf undefined: CIDEr-D needs at least 2 pairs, got {0}")]
    IdfUndefined(usize),
    #[error("BLEU order {0} outside 1..=4")]
    BadOrder(usize),
}

/// One candidate caption and its references, already tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn from_text<S: AsRef<str>>(candidate: &str, references: &[S]) -> Self {
        Self {
            candidate: text::words(candidate),
            references: references.iter().map(|r| text::words(r.as_ref())).collect(),
        }
    }
}

fn check(pairs: &[EvalPair]) -> Result<(), MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::NoPairs);
    }
    if let Some(i) = pairs.iter().position(|p| p.references.is_empty()) {
        return Err(MetricError::NoReferences(i));
    }
    Ok(())
}

type NgramCounts<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> NgramCounts<'_> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-n with clipped counts, brevity penalty and no smoothing.
pub fn bleu(pairs: &[EvalPair], n: usize) -> Result<f64, MetricError> {
    check(pairs)?;
    if !(1..=4).contains(&n) {
        return Err(MetricError::BadOrder(n));
    }
    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for pair in pairs {
        let c = pair.candidate.len();
        cand_len += c;
        // Closest reference length; shorter wins ties.
        ref_len += pair
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for order in 1..=n {
            let cand = ngrams(&pair.candidate, order);
            let mut max_ref: NgramCounts<'_> = HashMap::new();
            for r in &pair.references {
                for (g, cnt) in ngrams(r, order) {
                    let slot = max_ref.entry(g).or_insert(0);
                    *slot = (*slot).max(cnt);
                }
            }
            for (g, cnt) in cand {
                totals[order - 1] += cnt;
                matches[order - 1] += cnt.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    if cand_len == 0 || matches.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

pub(crate) fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_pair(pair: &EvalPair) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    pair.references
        .iter()
        .map(|r| {
            let lcs = lcs_len(&pair.candidate, r);
            if lcs == 0 {
                return 0.0;
            }
            let p = lcs as f64 / pair.candidate.len() as f64;
            let rec = lcs as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean over pairs of the best LCS F-measure (beta = 1.2) against any reference.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64, MetricError> {
    check(pairs)?;
    Ok(pairs.iter().map(rouge_l_pair).sum::<f64>() / pairs.len() as f64)
}

struct TfIdf {
    vecs: [HashMap<Vec<String>, f64>; CIDER_MAX_N],
    norms: [f64; CIDER_MAX_N],
    /// Number of bigrams; only differences matter for the length penalty.
    length: f64,
}

/// CIDEr-D: clipped tf-idf cosine per n-gram order with a Gaussian length
/// penalty, averaged over orders and references, times 10.
pub fn cider_d(pairs: &[EvalPair]) -> Result<f64, MetricError> {
    check(pairs)?;
    if pairs.len() < 2 {
        return Err(MetricError::IdfUndefined(pairs.len()));
    }
    // Document frequency: number of pairs whose references contain the n-gram.
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for pair in pairs {
        let mut seen: std::collections::HashSet<&[String]> = Default::default();
        for r in &pair.references {
            for n in 1..=CIDER_MAX_N {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_docs = (pairs.len() as f64).ln();
    let vectorize = |tokens: &[String]| -> TfIdf {
        let mut vecs: [HashMap<Vec<String>, f64>; CIDER_MAX_N] = Default::default();
        let mut norms = [0.0; CIDER_MAX_N];
        for n in 1..=CIDER_MAX_N {
            for (g, tf) in ngrams(tokens, n) {
                let doc_freq = df.get(g).copied().unwrap_or(0).max(1) as f64;
                let w = tf as f64 * (log_docs - doc_freq.ln());
                norms[n - 1] += w * w;
                vecs[n - 1].insert(g.to_vec(), w);
            }
        }
        TfIdf {
            vecs,
            norms: norms.map(f64::sqrt),
            length: tokens.len().saturating_sub(1) as f64,
        }
    };
    let mut total = 0.0;
    for pair in pairs {
        let cand = vectorize(&pair.candidate);
        let mut score = 0.0;
        for r in &pair.references {
            let reference = vectorize(r);
            let delta = cand.length - reference.length;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..CIDER_MAX_N {
                let mut val = 0.0;
                for (g, &w) in &cand.vecs[n] {
                    if let Some(&rw) = reference.vecs[n].get(g) {
                        val += w.min(rw) * rw;
                    }
                }
                if cand.norms[n] != 0.0 && reference.norms[n] != 0.0 {
                    val /= cand.norms[n] * reference.norms[n];
                }
                score += val * penalty;
            }
        }
        total += score / CIDER_MAX_N as f64 / pair.references.len() as f64 * 10.0;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub pair_count: usize,
}

pub const REPORT_METRICS: [&str; 6] = ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider_d"];

impl MetricReport {
    pub fn values(&self) -> [f64; 6] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l, self.cider_d]
    }

    /// `metric,value` CSV with four decimals per score.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in REPORT_METRICS.iter().zip(self.values()) {
            out.push_str(&format!("{name},{v:.4}\n"));
        }
        out.push_str(&format!("pair_count,{}\n", self.pair_count));
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8}", "metric", "value")?;
        for (name, v) in REPORT_METRICS.iter().zip(self.values()) {
            writeln!(f, "{name:<10} {v:>8.4}")?;
        }
        write!(f, "{:<10} {:>8}", "pairs", self.pair_count)
    }
}

pub fn evaluate_corpus(pairs: &[EvalPair]) -> Result<MetricReport, MetricError> {
    Ok(MetricReport {
        bleu1: bleu(pairs, 1)?,
        bleu2: bleu(pairs, 2)?,
        bleu3: bleu(pairs, 3)?,
        bleu4: bleu(pairs, 4)?,
        rouge_l: rouge_l(pairs)?,
        cider_d: cider_d(pairs)?,
        pair_count: pairs.len(),
    })
}
