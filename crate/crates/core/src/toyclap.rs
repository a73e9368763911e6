//! Deterministic stand-in for a contrastive audio-text dual encoder.
//!
//! Every word (event names included) owns a pseudo-random unit vector derived
//! from `hash(seed, word)`. An audio sample embeds as the normalized sum of its
//! event vectors; a caption embeds as the normalized weighted sum of its word
//! vectors, where words naming a known event get weight 1 and everything else
//! gets `alpha`. Paired audio and captions therefore land close in cosine
//! space without any learned weights.
//!
//! For decoder conditioning the encoder also exposes an `n x d` hidden-state
//! matrix: one row per event, offset by a small positional vector.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

/// Scale of the positional offsets added to hidden-state rows.
pub const POSITION_SCALE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("empty audio")]
    EmptyAudio,
    #[error("empty text")]
    EmptyText,
    #[error("invalid event token {0:?}: expected [a-z0-9_]+")]
    InvalidToken(String),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("embedding norm {0} is not 1")]
    NotUnitNorm(f64),
}

/// Name of an audio event, e.g. `dog_bark`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EventToken(String);

impl EventToken {
    pub fn new(name: impl Into<String>) -> Result<Self, EncoderError> {
        let name = name.into();
        let valid = !name.is_empty()
            && name
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_');
        if valid {
            Ok(Self(name))
        } else {
            Err(EncoderError::InvalidToken(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for EventToken {
    type Error = EncoderError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

impl From<EventToken> for String {
    fn from(t: EventToken) -> Self {
        t.0
    }
}

impl fmt::Display for EventToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A synthetic "audio clip": an ordered sequence of events plus a domain tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioSample {
    pub id: String,
    pub events: Vec<EventToken>,
    pub domain: String,
}

impl AudioSample {
    pub fn new(id: impl Into<String>, events: Vec<EventToken>, domain: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            events,
            domain: domain.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 0,
            alpha: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.dim < 2 {
            return Err(EncoderError::InvalidConfig(format!("dim {} < 2", self.dim)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(EncoderError::InvalidConfig(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Unit-norm vector in the shared audio/text space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Wraps values that are already unit norm (within 1e-6).
    pub fn new(values: Vec<f32>) -> Result<Self, EncoderError> {
        let norm = l2(values.iter().map(|&v| v as f64));
        if (norm - 1.0).abs() > 1e-6 {
            return Err(EncoderError::NotUnitNorm(norm));
        }
        Ok(Self(values))
    }

    /// Normalizes `values`; `None` for a zero or non-finite vector.
    pub fn normalized(values: &[f64]) -> Option<Self> {
        let norm = l2(values.iter().copied());
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(Self(values.iter().map(|v| (v / norm) as f32).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2(self.0.iter().map(|&v| v as f64))
    }

    /// Cosine similarity in double precision, clamped to [-1, 1].
    pub fn cosine(&self, other: &Embedding) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for (&a, &b) in self.0.iter().zip(&other.0) {
            let (a, b) = (a as f64, b as f64);
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
    }
}

fn l2(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

/// Per-event hidden states (`rows x dim`) used as cross-attention keys/values.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateSeq {
    values: Array2<f64>,
}

impl HiddenStateSeq {
    pub fn new(values: Array2<f64>) -> Self {
        Self { values }
    }
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// FNV-1a over a length-prefixed list of parts, so ("ab","c") != ("a","bc").
fn derive_seed(seed: u64, parts: &[&[u8]]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    feed(&seed.to_le_bytes());
    for part in parts {
        feed(&(part.len() as u64).to_le_bytes());
        feed(part);
    }
    h
}

fn gaussian_vector(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Unit vector owned by an arbitrary word under `config`.
pub fn word_vector(word: &str, config: &EncoderConfig) -> Embedding {
    let raw = gaussian_vector(derive_seed(config.seed, &[b"tok", word.as_bytes()]), config.dim);
    // A zero draw from a Gaussian has probability zero.
    Embedding::normalized(&raw).expect("gaussian draw is nonzero")
}

/// Deterministic unit vector for an event token.
pub fn base_vector(token: &EventToken, config: &EncoderConfig) -> Embedding {
    word_vector(token.as_str(), config)
}

/// Positional offset added to hidden-state row `index`, already scaled.
pub fn positional_vector(index: usize, config: &EncoderConfig) -> Vec<f64> {
    let raw = gaussian_vector(
        derive_seed(config.seed, &[b"pos", &(index as u64).to_le_bytes()]),
        config.dim,
    );
    let norm = l2(raw.iter().copied());
    raw.into_iter().map(|v| POSITION_SCALE * v / norm).collect()
}

/// The toy dual encoder: configuration plus the set of known event names
/// (needed to weight caption words).
#[derive(Debug, Clone)]
pub struct ToyClap {
    config: EncoderConfig,
    lexicon: BTreeSet<String>,
}

impl ToyClap {
    pub fn new<I, S>(config: EncoderConfig, events: I) -> Result<Self, EncoderError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        config.validate()?;
        Ok(Self {
            config,
            lexicon: events.into_iter().map(Into::into).collect(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn is_event(&self, word: &str) -> bool {
        self.lexicon.contains(word)
    }

    pub fn embed_audio(&self, sample: &AudioSample) -> Result<Embedding, EncoderError> {
        if sample.events.is_empty() {
            return Err(EncoderError::EmptyAudio);
        }
        let mut acc = vec![0.0f64; self.config.dim];
        for event in &sample.events {
            for (a, &v) in acc.iter_mut().zip(base_vector(event, &self.config).values()) {
                *a += v as f64;
            }
        }
        // Exactly cancelling event vectors cannot happen for distinct Gaussian draws;
        // fall back to the first event so the function stays total.
        Ok(Embedding::normalized(&acc)
            .unwrap_or_else(|| base_vector(&sample.events[0], &self.config)))
    }

    pub fn embed_text(&self, caption: &str) -> Result<Embedding, EncoderError> {
        let words = text::words(caption);
        if words.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let mut acc = vec![0.0f64; self.config.dim];
        for word in &words {
            let weight = if self.is_event(word) { 1.0 } else { self.config.alpha };
            if weight == 0.0 {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(word_vector(word, &self.config).values()) {
                *a += weight * v as f64;
            }
        }
        // alpha = 0 and no event words: nothing to go on, use the unweighted bag.
        if acc.iter().all(|&v| v == 0.0) {
            for word in &words {
                for (a, &v) in acc.iter_mut().zip(word_vector(word, &self.config).values()) {
                    *a += v as f64;
                }
            }
        }
        Embedding::normalized(&acc).ok_or(EncoderError::EmptyText)
    }

    pub fn audio_hidden_states(&self, sample: &AudioSample) -> Result<HiddenStateSeq, EncoderError> {
        if sample.events.is_empty() {
            return Err(EncoderError::EmptyAudio);
        }
        let d = self.config.dim;
        let mut values = Array2::zeros((sample.events.len(), d));
        for (i, event) in sample.events.iter().enumerate() {
            let base = base_vector(event, &self.config);
            let pos = positional_vector(i, &self.config);
            for j in 0..d {
                values[[i, j]] = base.values()[j] as f64 + pos[j];
            }
        }
        Ok(HiddenStateSeq::new(values))
    }
}
