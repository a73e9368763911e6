//! Forward pass and exact reverse-mode gradients.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! x1 = x  + SelfAttn(LN1(x))                 causal
//! x2 = x1 + tanh(g) * CrossAttn(LN(x1), H)   keys/values from audio rows H
//! x3 = x2 + FFN(LN2(x2))                     GELU
//! ```
//!
//! followed by a final layer norm and an untied output projection. The
//! cross-attention query norm has no parameters so that the adapter consists
//! of exactly its four projections and the gate.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{BlockParams, DecoderParams, FreezeMask};
use super::{DecoderError, TokenSeq};
use crate::toyclap::HiddenStateSeq;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, affine: Option<(&Array1<f64>, &Array1<f64>)>) -> (Array2<f64>, LnCache) {
    let (rows, cols) = x.dim();
    let mut xhat = Array2::zeros((rows, cols));
    let mut rstd = Array1::zeros(rows);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
    }
    let y = match affine {
        Some((g, b)) => &xhat * g + b,
        None => xhat.clone(),
    };
    (y, LnCache { xhat, rstd })
}

/// Returns dx and, when `gain` is given, accumulates dgain/dbias.
fn layer_norm_back(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: Option<&Array1<f64>>,
    dparams: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    if let Some((dg, db)) = dparams {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let dxhat = match gain {
        Some(g) => dy * g,
        None => dy.clone(),
    };
    let cols = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dxh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_d = dxh.sum() / cols;
        let mean_dx = dxh.dot(&xh) / cols;
        let r = cache.rstd[i];
        for ((o, &a), &b) in dx.row_mut(i).iter_mut().zip(dxh).zip(xh) {
            *o = r * (a - mean_d - b * mean_dx);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Row-wise softmax of `scores`; with `causal`, row i only sees columns <= i.
fn softmax_rows(scores: &mut Array2<f64>, causal: bool) {
    for (i, mut row) in scores.outer_iter_mut().enumerate() {
        let limit = if causal { i + 1 } else { row.len() };
        let max = row.iter().take(limit).cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < limit {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    heads: Array2<f64>,
}

fn attention(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>, n_heads: usize, causal: bool) -> AttnCache {
    let dh = q.ncols() / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Array2::zeros((q.nrows(), q.ncols()));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut p, causal);
        heads.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    AttnCache { q, k, v, probs, heads }
}

/// Gradients w.r.t. q, k, v given the gradient w.r.t. the concatenated heads.
fn attention_back(dheads: &Array2<f64>, c: &AttnCache) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let n_heads = c.probs.len();
    let dh = c.q.ncols() / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (h, p) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout = dheads.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dout));
        let dp = dout.dot(&c.v.slice(cols).t());
        // Softmax backward; masked entries have p = 0 and drop out.
        let mut ds = p * &dp;
        let row_sums = ds.sum_axis(Axis(1));
        for (i, mut row) in ds.outer_iter_mut().enumerate() {
            let pr = p.row(i);
            for (o, &pv) in row.iter_mut().zip(pr) {
                *o -= pv * row_sums[i];
            }
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    (dq, dk, dv)
}

struct CrossCache {
    ln: LnCache,
    attn: AttnCache,
    out: Array2<f64>,
    gate: f64,
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    self_attn: AttnCache,
    cross: Option<CrossCache>,
    ln2: LnCache,
    f: Array2<f64>,
    u: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) struct ForwardCache {
    ids: Vec<u32>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    y: Array2<f64>,
    hidden: Option<Array2<f64>>,
}

fn check_inputs(
    params: &DecoderParams,
    ids: &[u32],
    hidden: Option<&HiddenStateSeq>,
) -> Result<(), DecoderError> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(DecoderError::EmptySequence);
    }
    if ids.len() > cfg.max_len {
        return Err(DecoderError::TooLong {
            len: ids.len(),
            max: cfg.max_len,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(DecoderError::UnknownToken(bad));
    }
    if let Some(h) = hidden {
        if h.dim() != cfg.enc_dim {
            return Err(DecoderError::HiddenDim {
                expected: cfg.enc_dim,
                actual: h.dim(),
            });
        }
        if h.rows() == 0 {
            return Err(DecoderError::EmptyHidden);
        }
    }
    Ok(())
}

fn block_forward(
    b: &BlockParams,
    x: Array2<f64>,
    hidden: Option<ArrayView2<'_, f64>>,
    n_heads: usize,
) -> (Array2<f64>, BlockCache) {
    let (a, ln1) = layer_norm(&x, Some((&b.ln1_g, &b.ln1_b)));
    let self_attn = attention(a.dot(&b.wq), a.dot(&b.wk), a.dot(&b.wv), n_heads, true);
    let x1 = x + self_attn.heads.dot(&b.wo);

    let (x2, cross) = match hidden {
        Some(h) => {
            let (c, ln) = layer_norm(&x1, None);
            let attn = attention(c.dot(&b.xattn.wq), h.dot(&b.xattn.wk), h.dot(&b.xattn.wv), n_heads, false);
            let out = attn.heads.dot(&b.xattn.wo);
            let gate = b.xattn.gate[0].tanh();
            let x2 = &x1 + &out.mapv(|v| v * gate);
            (x2, Some(CrossCache { ln, attn, out, gate }))
        }
        None => (x1, None),
    };

    let (f, ln2) = layer_norm(&x2, Some((&b.ln2_g, &b.ln2_b)));
    let u = f.dot(&b.ff_w1) + &b.ff_b1;
    let act = u.mapv(gelu);
    let x3 = &x2 + &(act.dot(&b.ff_w2) + &b.ff_b2);
    (
        x3,
        BlockCache {
            ln1,
            a,
            self_attn,
            cross,
            ln2,
            f,
            u,
            act,
        },
    )
}

/// Forward pass keeping every intermediate needed by [`backward`]. With
/// `hidden = None` the cross-attention sublayers are skipped entirely.
pub(crate) fn forward_cached(
    params: &DecoderParams,
    ids: &[u32],
    hidden: Option<&HiddenStateSeq>,
) -> Result<(Array2<f64>, ForwardCache), DecoderError> {
    check_inputs(params, ids, hidden)?;
    let t = ids.len();
    let d = params.config.d_model;
    let mut x = Array2::zeros((t, d));
    for (i, &id) in ids.iter().enumerate() {
        let row = &params.tok_emb.row(id as usize) + &params.pos_emb.row(i);
        x.row_mut(i).assign(&row);
    }
    let hview = hidden.map(|h| h.values().view());
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (next, cache) = block_forward(b, x, hview, params.config.n_heads);
        blocks.push(cache);
        x = next;
    }
    let (y, lnf) = layer_norm(&x, Some((&params.lnf_g, &params.lnf_b)));
    let logits = y.dot(&params.w_out);
    Ok((
        logits,
        ForwardCache {
            ids: ids.to_vec(),
            blocks,
            lnf,
            y,
            hidden: hidden.map(|h| h.values().clone()),
        },
    ))
}

/// Logits (`len x vocab`) for input ids conditioned on audio hidden states.
pub fn forward(
    params: &DecoderParams,
    ids: &[u32],
    hidden: &HiddenStateSeq,
) -> Result<Array2<f64>, DecoderError> {
    forward_cached(params, ids, Some(hidden)).map(|(l, _)| l)
}

/// Logits of the base language model alone, with cross-attention removed.
pub fn forward_base(params: &DecoderParams, ids: &[u32]) -> Result<Array2<f64>, DecoderError> {
    forward_cached(params, ids, None).map(|(l, _)| l)
}

fn log_softmax_row(row: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

/// Per-position cross-entropy (natural log) at the masked positions, in order.
pub fn token_losses(logits: &Array2<f64>, seq: &TokenSeq) -> Result<Vec<f64>, DecoderError> {
    let (inputs, targets) = seq.shifted();
    if logits.nrows() != inputs.len() {
        return Err(DecoderError::Shape(format!(
            "{} logit rows for {} input tokens",
            logits.nrows(),
            inputs.len()
        )));
    }
    let mut out = Vec::new();
    for (t, target) in targets.iter().enumerate() {
        if let Some(target) = target {
            if *target as usize >= logits.ncols() {
                return Err(DecoderError::UnknownToken(*target));
            }
            out.push(-log_softmax_row(logits.row(t))[*target as usize]);
        }
    }
    if out.is_empty() {
        return Err(DecoderError::NothingToScore);
    }
    Ok(out)
}

/// Mean cross-entropy over caption positions.
pub fn loss(logits: &Array2<f64>, seq: &TokenSeq) -> Result<f64, DecoderError> {
    let l = token_losses(logits, seq)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

/// Loss and gradients for one sequence. Only tensors whose group `mask`
/// trains receive gradient; all others stay zero in the returned buffer.
pub fn loss_and_grad(
    params: &DecoderParams,
    seq: &TokenSeq,
    hidden: Option<&HiddenStateSeq>,
    mask: FreezeMask,
) -> Result<(f64, DecoderParams), DecoderError> {
    let mut grads = params.zeros_like();
    let l = accumulate_grad(params, seq, hidden, mask, 1.0, &mut grads)?;
    Ok((l, grads))
}

/// Adds `scale * d loss / d params` into `grads` and returns the loss.
pub fn accumulate_grad(
    params: &DecoderParams,
    seq: &TokenSeq,
    hidden: Option<&HiddenStateSeq>,
    mask: FreezeMask,
    scale: f64,
    grads: &mut DecoderParams,
) -> Result<f64, DecoderError> {
    let (inputs, targets) = seq.shifted();
    let (logits, cache) = forward_cached(params, inputs, hidden)?;
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(DecoderError::NothingToScore);
    }
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (t, target) in targets.iter().enumerate() {
        let Some(target) = *target else { continue };
        let logp = log_softmax_row(logits.row(t));
        total -= logp[target as usize];
        let mut drow = dlogits.row_mut(t);
        for (o, lp) in drow.iter_mut().zip(logp.iter()) {
            *o = lp.exp() * scale / count as f64;
        }
        drow[target as usize] -= scale / count as f64;
    }
    backward(params, &cache, &dlogits, mask, grads);
    Ok(total / count as f64)
}

fn backward(
    params: &DecoderParams,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
    mask: FreezeMask,
    grads: &mut DecoderParams,
) {
    let base = mask.base;
    let cross = mask.cross_attn && cache.hidden.is_some();
    if base {
        grads.w_out += &cache.y.t().dot(dlogits);
    }
    let dy = dlogits.dot(&params.w_out.t());
    let mut dx = if base {
        layer_norm_back(
            &dy,
            &cache.lnf,
            Some(&params.lnf_g),
            Some((&mut grads.lnf_g, &mut grads.lnf_b)),
        )
    } else {
        layer_norm_back(&dy, &cache.lnf, Some(&params.lnf_g), None)
    };

    for (bi, (b, c)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let g = &mut grads.blocks[bi];
        // Feed-forward.
        let dffo = &dx;
        let dact = dffo.dot(&b.ff_w2.t());
        let mut du = dact;
        du.zip_mut_with(&c.u, |d, &u| *d *= gelu_grad(u));
        if base {
            g.ff_w2 += &c.act.t().dot(dffo);
            g.ff_b2 += &dffo.sum_axis(Axis(0));
            g.ff_w1 += &c.f.t().dot(&du);
            g.ff_b1 += &du.sum_axis(Axis(0));
        }
        let df = du.dot(&b.ff_w1.t());
        let dparams = base.then_some((&mut g.ln2_g, &mut g.ln2_b));
        let mut dx2 = layer_norm_back(&df, &c.ln2, Some(&b.ln2_g), dparams);
        dx2 += &dx;

        // Cross-attention.
        let mut dx1 = dx2.clone();
        if let (Some(cc), Some(h)) = (&c.cross, &cache.hidden) {
            if cross {
                let dgate = (1.0 - cc.gate * cc.gate) * (&dx2 * &cc.out).sum();
                g.xattn.gate[0] += dgate;
            }
            // Nothing below this point is trainable.
            let below_trainable = base || (cross && bi > 0);
            if cross || below_trainable {
                let dout = dx2.mapv(|v| v * cc.gate);
                if cross {
                    g.xattn.wo += &cc.attn.heads.t().dot(&dout);
                }
                let dheads = dout.dot(&b.xattn.wo.t());
                let (dq, dk, dv) = attention_back(&dheads, &cc.attn);
                if cross {
                    let cin = &cc.ln.xhat;
                    g.xattn.wq += &cin.t().dot(&dq);
                    g.xattn.wk += &h.t().dot(&dk);
                    g.xattn.wv += &h.t().dot(&dv);
                }
                if below_trainable {
                    let dc = dq.dot(&b.xattn.wq.t());
                    dx1 += &layer_norm_back(&dc, &cc.ln, None, None);
                }
            }
        }
        if !base && !(cross && bi > 0) {
            return;
        }

        // Self-attention.
        if base {
            g.wo += &c.self_attn.heads.t().dot(&dx1);
        }
        let dheads = dx1.dot(&b.wo.t());
        let (dq, dk, dv) = attention_back(&dheads, &c.self_attn);
        if base {
            g.wq += &c.a.t().dot(&dq);
            g.wk += &c.a.t().dot(&dk);
            g.wv += &c.a.t().dot(&dv);
        }
        let da = dq.dot(&b.wq.t()) + dk.dot(&b.wk.t()) + dv.dot(&b.wv.t());
        let dparams = base.then_some((&mut g.ln1_g, &mut g.ln1_b));
        let mut dxin = layer_norm_back(&da, &c.ln1, Some(&b.ln1_g), dparams);
        dxin += &dx1;
        dx = dxin;
    }

    if base {
        for (i, &id) in cache.ids.iter().enumerate() {
            let row = dx.row(i);
            let mut te = grads.tok_emb.row_mut(id as usize);
            te += &row;
            let mut pe = grads.pos_emb.row_mut(i);
            pe += &row;
        }
    }
}
