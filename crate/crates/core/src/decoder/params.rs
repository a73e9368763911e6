//! Decoder weights, grouped into the frozen base language model and the
//! trainable cross-attention adapters.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DecoderConfig, DecoderError};

/// Which optimizer group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Base,
    CrossAttn,
}

/// Trainability per group. The caption-training mask trains exactly the
/// cross-attention group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeMask {
    pub base: bool,
    pub cross_attn: bool,
}

impl FreezeMask {
    /// Frozen base, trainable cross-attention.
    pub const ADAPTERS: FreezeMask = FreezeMask {
        base: false,
        cross_attn: true,
    };
    /// Language-model pretraining of the base weights.
    pub const BASE: FreezeMask = FreezeMask {
        base: true,
        cross_attn: false,
    };
    pub const ALL: FreezeMask = FreezeMask {
        base: true,
        cross_attn: true,
    };

    pub fn trains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Base => self.base,
            ParamGroup::CrossAttn => self.cross_attn,
        }
    }
}

/// Cross-attention adapter of one block. Queries come from the token stream,
/// keys and values from the audio hidden states; the output is scaled by
/// `tanh(gate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub gate: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array1<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array1<f64>,
    pub xattn: CrossAttnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_out: Array2<f64>,
}

/// View of one named tensor; `D` is `&[f64]` or `&mut [f64]`.
pub struct TensorView<D> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: D,
}

const BASE_INIT_STD: f64 = 0.02;

fn normal2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Expands to a `Vec<TensorView<_>>` over every tensor, in checkpoint order.
macro_rules! tensor_views {
    ($params:expr, $iter:ident, $slice:ident) => {{
        let params = $params;
        let mut out = Vec::new();
        macro_rules! view {
            ($name:expr, $group:expr, $arr:expr) => {
                out.push(TensorView {
                    name: $name,
                    group: $group,
                    shape: $arr.shape().to_vec(),
                    data: $arr.$slice().expect("standard layout"),
                })
            };
        }
        use ParamGroup::{Base, CrossAttn};
        view!("tok_emb".to_string(), Base, params.tok_emb);
        view!("pos_emb".to_string(), Base, params.pos_emb);
        for (i, b) in params.blocks.$iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            view!(p("ln1_g"), Base, b.ln1_g);
            view!(p("ln1_b"), Base, b.ln1_b);
            view!(p("attn_q"), Base, b.wq);
            view!(p("attn_k"), Base, b.wk);
            view!(p("attn_v"), Base, b.wv);
            view!(p("attn_o"), Base, b.wo);
            view!(p("ln2_g"), Base, b.ln2_g);
            view!(p("ln2_b"), Base, b.ln2_b);
            view!(p("ff_w1"), Base, b.ff_w1);
            view!(p("ff_b1"), Base, b.ff_b1);
            view!(p("ff_w2"), Base, b.ff_w2);
            view!(p("ff_b2"), Base, b.ff_b2);
            view!(p("xattn_q"), CrossAttn, b.xattn.wq);
            view!(p("xattn_k"), CrossAttn, b.xattn.wk);
            view!(p("xattn_v"), CrossAttn, b.xattn.wv);
            view!(p("xattn_o"), CrossAttn, b.xattn.wo);
            view!(p("xattn_gate"), CrossAttn, b.xattn.gate);
        }
        view!("lnf_g".to_string(), Base, params.lnf_g);
        view!("lnf_b".to_string(), Base, params.lnf_b);
        view!("w_out".to_string(), Base, params.w_out);
        out
    }};
}

/// Scalar counts behind the trainable-fraction figure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamAccount {
    pub base: usize,
    pub cross_attn: usize,
    /// Frozen encoder accounted as a single `enc_dim x enc_dim` matrix.
    pub encoder_placeholder: usize,
}

impl ParamAccount {
    pub fn total(&self) -> usize {
        self.base + self.cross_attn + self.encoder_placeholder
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.cross_attn as f64 / self.total() as f64
    }
}

impl DecoderParams {
    /// Random initialization. Base weights use N(0, 0.02); cross-attention
    /// projections use N(0, 1/fan_in); gates start at `config.gate_init`.
    pub fn init(config: &DecoderConfig, seed: u64) -> Result<Self, DecoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, t, f, e) = (
            config.vocab_size,
            config.d_model,
            config.max_len,
            config.d_ff,
            config.enc_dim,
        );
        let tok_emb = normal2(&mut rng, v, d, BASE_INIT_STD);
        let pos_emb = normal2(&mut rng, t, d, BASE_INIT_STD);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let wq = normal2(&mut rng, d, d, BASE_INIT_STD);
            let wk = normal2(&mut rng, d, d, BASE_INIT_STD);
            let wv = normal2(&mut rng, d, d, BASE_INIT_STD);
            let wo = normal2(&mut rng, d, d, BASE_INIT_STD);
            let ff_w1 = normal2(&mut rng, d, f, BASE_INIT_STD);
            let ff_w2 = normal2(&mut rng, f, d, BASE_INIT_STD);
            let xattn = CrossAttnParams {
                wq: normal2(&mut rng, d, d, 1.0 / (d as f64).sqrt()),
                wk: normal2(&mut rng, e, d, 1.0 / (e as f64).sqrt()),
                wv: normal2(&mut rng, e, d, 1.0 / (e as f64).sqrt()),
                wo: normal2(&mut rng, d, d, 1.0 / (d as f64).sqrt()),
                gate: Array1::from_elem(1, config.gate_init),
            };
            blocks.push(BlockParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq,
                wk,
                wv,
                wo,
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                ff_w1,
                ff_b1: Array1::zeros(f),
                ff_w2,
                ff_b2: Array1::zeros(d),
                xattn,
            });
        }
        let w_out = normal2(&mut rng, d, v, BASE_INIT_STD);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            w_out,
        })
    }

    pub fn tensors(&self) -> Vec<TensorView<&[f64]>> {
        tensor_views!(self, iter, as_slice)
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorView<&mut [f64]>> {
        tensor_views!(self, iter_mut, as_slice_mut)
    }

    /// Same shapes, all zeros. Used for gradient and moment buffers.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.fill(0.0);
        }
        out
    }

    /// Sets every cross-attention gate to `value`.
    pub fn set_gates(&mut self, value: f64) {
        for b in &mut self.blocks {
            b.xattn.gate.fill(value);
        }
    }

    pub fn account(&self) -> ParamAccount {
        let mut acc = ParamAccount {
            base: 0,
            cross_attn: 0,
            encoder_placeholder: self.config.enc_dim * self.config.enc_dim,
        };
        for t in self.tensors() {
            match t.group {
                ParamGroup::Base => acc.base += t.data.len(),
                ParamGroup::CrossAttn => acc.cross_attn += t.data.len(),
            }
        }
        acc
    }

    /// Cross-attention scalars over all scalars, encoder placeholder included.
    pub fn trainable_fraction(&self) -> f64 {
        self.account().trainable_fraction()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}
