//! Central finite-difference gradient check. Shared by several test targets
//! through `#[path]`.

use recap_core::decoder::{loss_and_grad, DecoderParams, FreezeMask, TokenSeq};
use recap_core::HiddenStateSeq;

fn numeric_loss(p: &DecoderParams, seq: &TokenSeq, h: &HiddenStateSeq) -> f64 {
    loss_and_grad(p, seq, Some(h), FreezeMask { base: false, cross_attn: false })
        .unwrap()
        .0
}

/// Largest relative error over every scalar, with a small absolute floor.
pub fn max_rel_error(params: &DecoderParams, seq: &TokenSeq, h: &HiddenStateSeq, mask: FreezeMask) -> f64 {
    let (_, grads) = loss_and_grad(params, seq, Some(h), mask).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    let analytic: Vec<(bool, Vec<f64>)> = grads
        .tensors()
        .iter()
        .map(|t| (mask.trains(t.group), t.data.to_vec()))
        .collect();
    for (ti, (trained, ga)) in analytic.iter().enumerate() {
        for i in 0..ga.len() {
            if !trained {
                assert_eq!(ga[i], 0.0);
                continue;
            }
            let orig = probe.tensors()[ti].data[i];
            probe.tensors_mut()[ti].data[i] = orig + eps;
            let lp = numeric_loss(&probe, seq, h);
            probe.tensors_mut()[ti].data[i] = orig - eps;
            let lm = numeric_loss(&probe, seq, h);
            probe.tensors_mut()[ti].data[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let rel = (ga[i] - num).abs() / (ga[i].abs() + num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}
