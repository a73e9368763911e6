//! Word-level transformer decoder with gated cross-attention over audio
//! hidden states.
//!
//! The base language model (embeddings, self-attention, feed-forward, norms,
//! output projection) is frozen while captioning is learned; only the
//! per-block cross-attention projections and their `tanh` gates train. With
//! every gate at zero the model is exactly its base language model.

mod checkpoint;
mod generate;
mod model;
mod params;
mod train;
mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use generate::{generate, Strategy};
pub use model::{accumulate_grad, forward, forward_base, loss, loss_and_grad, token_losses};
pub use params::{
    BlockParams, CrossAttnParams, DecoderParams, FreezeMask, ParamAccount, ParamGroup, TensorView,
};
pub use train::{train, Adam, AdamConfig, Example, TrainConfig, TrainOutcome};
pub use vocab::{Vocabulary, BOS, EOS, PAD, SPECIALS, UNK};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoderError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds max length {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {0} outside the vocabulary")]
    UnknownToken(u32),
    #[error("hidden-state dim {actual} does not match cross-attention input dim {expected}")]
    HiddenDim { expected: usize, actual: usize },
    #[error("hidden-state sequence has no rows")]
    EmptyHidden,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("every target position is masked out")]
    NothingToScore,
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Width of the audio hidden states; must equal the encoder dim.
    pub enc_dim: usize,
    #[serde(default)]
    pub gate_init: f64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        let bad = |m: String| Err(DecoderError::InvalidConfig(m));
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("enc_dim", self.enc_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.vocab_size <= SPECIALS.len() {
            return bad(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.gate_init.is_finite() {
            return bad("gate_init must be finite".into());
        }
        Ok(())
    }
}

/// A `BOS ... EOS` token sequence. `caption_mask[i]` marks tokens that are
/// scored (the caption and its EOS); prompt tokens are context only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub caption_mask: Vec<bool>,
}

impl TokenSeq {
    /// `BOS prompt caption EOS`, scoring the caption and EOS.
    pub fn with_prompt(prompt: &[u32], caption: &[u32]) -> Self {
        let mut ids = Vec::with_capacity(prompt.len() + caption.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(prompt);
        let start = ids.len();
        ids.extend_from_slice(caption);
        ids.push(EOS);
        let caption_mask = (0..ids.len()).map(|i| i >= start).collect();
        Self { ids, caption_mask }
    }

    /// Number of input positions the decoder sees (`len - 1`).
    pub fn input_len(&self) -> usize {
        self.ids.len().saturating_sub(1)
    }

    /// Decoder inputs and, per input position, the scored next token.
    pub fn shifted(&self) -> (&[u32], Vec<Option<u32>>) {
        let n = self.input_len();
        let targets = (0..n)
            .map(|t| self.caption_mask[t + 1].then_some(self.ids[t + 1]))
            .collect();
        (&self.ids[..n], targets)
    }
}
