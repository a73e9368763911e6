//! Straight-line metric implementations used as test oracles. Shared by
//! several test targets through `#[path]`.

use std::collections::BTreeMap;

use recap_core::metrics::EvalPair;

fn grams(tokens: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        *out.entry(tokens[i..i + n].join(" ")).or_insert(0.0) += 1.0;
        i += 1;
    }
    out
}

pub fn oracle_bleu(pairs: &[EvalPair], n: usize) -> f64 {
    let mut hits = [0.0; 4];
    let mut total = [0.0; 4];
    let mut c = 0.0;
    let mut r = 0.0;
    for p in pairs {
        let cl = p.candidate.len() as f64;
        c += cl;
        let mut best = f64::INFINITY;
        let mut best_len = 0.0;
        for rf in &p.references {
            let rl = rf.len() as f64;
            let d = (rl - cl).abs();
            if d < best || (d == best && rl < best_len) {
                best = d;
                best_len = rl;
            }
        }
        r += best_len;
        for k in 1..=n {
            for (g, cnt) in grams(&p.candidate, k) {
                let mut max_ref: f64 = 0.0;
                for rf in &p.references {
                    max_ref = max_ref.max(*grams(rf, k).get(&g).unwrap_or(&0.0));
                }
                hits[k - 1] += cnt.min(max_ref);
                total[k - 1] += cnt;
            }
        }
    }
    if c == 0.0 {
        return 0.0;
    }
    let mut prod = 1.0;
    for k in 0..n {
        if hits[k] == 0.0 {
            return 0.0;
        }
        prod *= hits[k] / total[k];
    }
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * prod.powf(1.0 / n as f64)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    // Full table, filled from the end.
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] {
                1 + t[i + 1][j + 1]
            } else {
                t[i + 1][j].max(t[i][j + 1])
            };
        }
    }
    t[0][0]
}

pub fn oracle_rouge(pairs: &[EvalPair]) -> f64 {
    let beta: f64 = 1.2;
    let mut sum = 0.0;
    for p in pairs {
        let mut best: f64 = 0.0;
        for rf in &p.references {
            let l = lcs(&p.candidate, rf) as f64;
            if l > 0.0 {
                let prec = l / p.candidate.len() as f64;
                let rec = l / rf.len() as f64;
                best = best.max((1.0 + beta * beta) * prec * rec / (rec + beta * beta * prec));
            }
        }
        sum += best;
    }
    sum / pairs.len() as f64
}

pub fn oracle_cider(pairs: &[EvalPair]) -> f64 {
    let n_docs = pairs.len() as f64;
    let mut df: BTreeMap<String, f64> = BTreeMap::new();
    for p in pairs {
        let mut keys = std::collections::BTreeSet::new();
        for rf in &p.references {
            for k in 1..=4 {
                for g in grams(rf, k).into_keys() {
                    keys.insert(format!("{k}|{g}"));
                }
            }
        }
        for key in keys {
            *df.entry(key).or_insert(0.0) += 1.0;
        }
    }
    let weights = |toks: &[String], k: usize| -> BTreeMap<String, f64> {
        grams(toks, k)
            .into_iter()
            .map(|(g, tf)| {
                let d = df.get(&format!("{k}|{g}")).copied().unwrap_or(0.0).max(1.0);
                (g, tf * (n_docs.ln() - d.ln()))
            })
            .collect()
    };
    let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for p in pairs {
        let mut per_ref = 0.0;
        for rf in &p.references {
            let cl = p.candidate.len().max(1) as f64 - 1.0;
            let rl = rf.len().max(1) as f64 - 1.0;
            let pen = (-(cl - rl).powi(2) / 72.0).exp();
            let mut s = 0.0;
            for k in 1..=4 {
                let cv = weights(&p.candidate, k);
                let rv = weights(rf, k);
                let mut dot = 0.0;
                for (g, w) in &cv {
                    if let Some(x) = rv.get(g) {
                        dot += w.min(*x) * x;
                    }
                }
                let (nc, nr) = (norm(&cv), norm(&rv));
                if nc != 0.0 && nr != 0.0 {
                    dot /= nc * nr;
                }
                s += dot * pen;
            }
            per_ref += s / 4.0;
        }
        total += 10.0 * per_ref / p.references.len() as f64;
    }
    total / n_docs
}
