//! Mini-batch Adam over the trainable parameter groups.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::accumulate_grad;
use super::params::{DecoderParams, FreezeMask};
use super::{DecoderError, TokenSeq};
use crate::toyclap::HiddenStateSeq;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments exist for every tensor but only the
/// groups selected by the mask are ever touched.
pub struct Adam {
    cfg: AdamConfig,
    m: DecoderParams,
    v: DecoderParams,
    step: i32,
}

impl Adam {
    pub fn new(params: &DecoderParams, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut DecoderParams, grads: &DecoderParams, mask: FreezeMask) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            if !mask.trains(p.group) {
                continue;
            }
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One teacher-forced training sequence and its conditioning audio. Without
/// audio the cross-attention sublayers are skipped.
#[derive(Debug, Clone)]
pub struct Example {
    pub seq: TokenSeq,
    pub hidden: Option<HiddenStateSeq>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DecoderParams,
    /// Mean per-example loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains the groups selected by `mask`. Batch loss is the mean of
/// per-example losses; each epoch visits examples in a seeded shuffle.
/// `on_epoch` sees the epoch index, its mean loss and the current weights.
pub fn train(
    mut params: DecoderParams,
    examples: &[Example],
    mask: FreezeMask,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &DecoderParams),
) -> Result<TrainOutcome, DecoderError> {
    if examples.is_empty() {
        return Err(DecoderError::EmptyDataset);
    }
    let batch_size = cfg.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&params, cfg.adam());
    let mut grads = params.zeros_like();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            for t in grads.tensors_mut() {
                t.data.fill(0.0);
            }
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &examples[i];
                total += accumulate_grad(&params, &ex.seq, ex.hidden.as_ref(), mask, scale, &mut grads)?;
            }
            adam.step(&mut params, &grads, mask);
        }
        let mean = total / examples.len() as f64;
        if !mean.is_finite() {
            return Err(DecoderError::NonFinite { epoch });
        }
        epoch_losses.push(mean);
        on_epoch(epoch, mean, &params);
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}
