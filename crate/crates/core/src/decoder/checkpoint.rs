//! Binary checkpoint: decoder config, vocabulary, every named tensor, and the
//! encoder settings needed to rebuild the conditioning features.

use std::path::Path;

use thiserror::Error;

use super::params::DecoderParams;
use super::vocab::Vocabulary;
use super::{DecoderConfig, DecoderError};
use crate::binio::{ReadError, Reader, Writer};
use crate::toyclap::EncoderConfig;

const MAGIC: &[u8; 4] = b"RCPT";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ReadError> for CheckpointError {
    fn from(e: ReadError) -> Self {
        match e {
            ReadError::Truncated => CheckpointError::Truncated,
            ReadError::Utf8 => CheckpointError::Corrupt("invalid UTF-8".into()),
        }
    }
}

impl From<crate::binio::Truncated> for CheckpointError {
    fn from(_: crate::binio::Truncated) -> Self {
        CheckpointError::Truncated
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DecoderParams,
    pub vocab: Vocabulary,
    pub encoder_config: EncoderConfig,
    /// Event lexicon of the encoder.
    pub events: Vec<String>,
}

fn usize_u64(r: &mut Reader) -> Result<usize, CheckpointError> {
    let v = r.u64()?;
    usize::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("size {v} out of range")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        let c = &self.params.config;
        for v in [c.n_layers, c.d_model, c.n_heads, c.d_ff, c.max_len, c.vocab_size, c.enc_dim] {
            w.u64(v as u64);
        }
        w.f64(c.gate_init);
        let words = self.vocab.words();
        w.u64(words.len() as u64);
        for word in words {
            w.str(word);
        }
        let tensors = self.params.tensors();
        w.u64(tensors.len() as u64);
        for t in tensors {
            w.str(&t.name);
            w.u32(t.shape.len() as u32);
            for &s in &t.shape {
                w.u64(s as u64);
            }
            for &v in t.data {
                w.f64(v);
            }
        }
        w.u64(self.encoder_config.seed);
        w.f64(self.encoder_config.alpha);
        w.u64(self.encoder_config.dim as u64);
        w.u64(self.events.len() as u64);
        for e in &self.events {
            w.str(e);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(bytes);
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = usize_u64(&mut r)?;
        }
        let config = DecoderConfig {
            n_layers: dims[0],
            d_model: dims[1],
            n_heads: dims[2],
            d_ff: dims[3],
            max_len: dims[4],
            vocab_size: dims[5],
            enc_dim: dims[6],
            gate_init: r.f64()?,
        };
        config.validate()?;
        let n_words = usize_u64(&mut r)?;
        if n_words > r.remaining() {
            return Err(CheckpointError::Truncated);
        }
        let mut words = Vec::with_capacity(n_words);
        for _ in 0..n_words {
            words.push(r.str()?);
        }
        let vocab = Vocabulary::from_words(words)?;
        if vocab.len() != config.vocab_size {
            return Err(CheckpointError::Corrupt(format!(
                "vocabulary has {} words, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut params = DecoderParams::init(&config, 0)?;
        let n_tensors = usize_u64(&mut r)?;
        let mut views = params.tensors_mut();
        if n_tensors != views.len() {
            return Err(CheckpointError::Corrupt(format!(
                "expected {} tensors, found {n_tensors}",
                views.len()
            )));
        }
        for t in views.iter_mut() {
            let name = r.str()?;
            if name != t.name {
                return Err(CheckpointError::Corrupt(format!(
                    "expected tensor {}, found {name}",
                    t.name
                )));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize_u64(&mut r)?);
            }
            if shape != t.shape {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    t.shape
                )));
            }
            for v in t.data.iter_mut() {
                *v = r.f64()?;
            }
        }
        drop(views);
        let encoder_config = EncoderConfig {
            seed: r.u64()?,
            alpha: r.f64()?,
            dim: usize_u64(&mut r)?,
        };
        let n_events = usize_u64(&mut r)?;
        if n_events > r.remaining() {
            return Err(CheckpointError::Truncated);
        }
        let mut events = Vec::with_capacity(n_events);
        for _ in 0..n_events {
            events.push(r.str()?);
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            params,
            vocab,
            encoder_config,
            events,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
