//! Retrieval-augmented audio captioning at desk scale.
//!
//! The pipeline has five stages, each in its own module:
//!
//! - [`toyclap`]: a deterministic dual encoder that places synthetic audio
//!   samples and text captions in a shared unit-norm embedding space, and
//!   exposes per-event hidden states for conditioning.
//! - [`datastore`]: a swappable collection of captions with precomputed
//!   embeddings, exact top-k cosine retrieval and a binary file format.
//! - [`prompting`]: turns retrieved captions into the conditioning prompt.
//! - [`decoder`]: a word-level transformer decoder with gated cross-attention
//!   over audio hidden states. Only the cross-attention weights are trained.
//! - [`metrics`]: corpus BLEU-1..4, ROUGE-L and CIDEr-D.
//!
//! [`corpus`] generates the synthetic multi-domain datasets the rest of the
//! crate is exercised on.

pub mod corpus;
pub mod datastore;
pub mod decoder;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod text;
pub mod toyclap;

pub(crate) mod binio;

pub use corpus::{Dataset, DomainSpec, GenConfig, Split};
pub use datastore::{CaptionEntry, Datastore, RetrievalHit};
pub use decoder::{DecoderConfig, DecoderParams, Vocabulary};
pub use metrics::{EvalPair, MetricReport};
pub use prompting::{PromptText, RetrievalConfig};
pub use toyclap::{AudioSample, Embedding, EncoderConfig, EventToken, HiddenStateSeq, ToyClap};
