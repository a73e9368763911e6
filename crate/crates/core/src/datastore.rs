//! Caption datastore with exact top-k cosine retrieval.
//!
//! A datastore is immutable once built or loaded. Swapping one file for another
//! changes what the captioner is conditioned on without touching the model.
//!
//! File layout (little-endian):
//!
//! ```text
//! "RCDS" | u16 version=1 | u32 dim | u64 count
//! u64 seed | f64 alpha | u32 dim            (encoder config)
//! count x { str entry_id | str text | str source | dim x f32 }
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::binio::{ReadError, Reader, Truncated, Writer};
use crate::toyclap::{EncoderConfig, EncoderError, Embedding, ToyClap};

pub const MAGIC: &[u8; 4] = b"RCDS";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("no captions to build a datastore from")]
    Empty,
    #[error("caption {index} is empty")]
    EmptyCaption { index: usize },
    #[error("dimension mismatch: datastore has {expected}, query has {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("encoder configs differ; embeddings are not comparable")]
    ConfigMismatch,
    #[error("duplicate entry id {0:?}")]
    DuplicateId(String),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported datastore version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated datastore file")]
    Truncated,
    #[error("corrupt datastore file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<Truncated> for DatastoreError {
    fn from(_: Truncated) -> Self {
        DatastoreError::Truncated
    }
}

impl From<ReadError> for DatastoreError {
    fn from(e: ReadError) -> Self {
        match e {
            ReadError::Truncated => DatastoreError::Truncated,
            ReadError::Utf8 => DatastoreError::Corrupt("invalid UTF-8 string".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEntry {
    pub entry_id: String,
    pub text: String,
    pub embedding: Embedding,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHit {
    pub entry_id: String,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    name: String,
    encoder_config: EncoderConfig,
    entries: Vec<CaptionEntry>,
}

/// Heap item ordered so that the *worst* hit sits on top of a max-heap.
struct Ranked<'a> {
    score: f64,
    entry: &'a CaptionEntry,
}

impl Ranked<'_> {
    /// Ordering by retrieval rank: higher score first, then ascending id.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.entry.entry_id.cmp(&other.entry.entry_id))
    }
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked<'_> {}
impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

impl Datastore {
    /// Embeds every caption with `encoder`. Ids are sequential and zero-padded
    /// so string order matches insertion order.
    pub fn build<S, T>(
        name: impl Into<String>,
        captions: &[(S, T)],
        encoder: &ToyClap,
    ) -> Result<Self, DatastoreError>
    where
        S: AsRef<str>,
        T: AsRef<str>,
    {
        if captions.is_empty() {
            return Err(DatastoreError::Empty);
        }
        let width = captions.len().to_string().len().max(6);
        let mut entries = Vec::with_capacity(captions.len());
        for (index, (text, source)) in captions.iter().enumerate() {
            let text = text.as_ref();
            if text.trim().is_empty() {
                return Err(DatastoreError::EmptyCaption { index });
            }
            let embedding = encoder.embed_text(text).map_err(|e| match e {
                EncoderError::EmptyText => DatastoreError::EmptyCaption { index },
                other => other.into(),
            })?;
            entries.push(CaptionEntry {
                entry_id: format!("{index:0width$}"),
                text: text.to_owned(),
                embedding,
                source: source.as_ref().to_owned(),
            });
        }
        Ok(Self {
            name: name.into(),
            encoder_config: *encoder.config(),
            entries,
        })
    }

    /// Assembles a datastore from prepared entries, checking dimensions and id
    /// uniqueness.
    pub fn from_entries(
        name: impl Into<String>,
        encoder_config: EncoderConfig,
        entries: Vec<CaptionEntry>,
    ) -> Result<Self, DatastoreError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.embedding.dim() != encoder_config.dim {
                return Err(DatastoreError::DimMismatch {
                    expected: encoder_config.dim,
                    actual: e.embedding.dim(),
                });
            }
            if !seen.insert(e.entry_id.as_str()) {
                return Err(DatastoreError::DuplicateId(e.entry_id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            encoder_config,
            entries,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim(&self) -> usize {
        self.encoder_config.dim
    }
    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder_config
    }
    pub fn entries(&self) -> &[CaptionEntry] {
        &self.entries
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `k` entries most cosine-similar to `query`, skipping `exclude`.
    /// Ties go to the smaller entry id.
    pub fn query_topk(
        &self,
        query: &Embedding,
        k: usize,
        exclude: &HashSet<String>,
    ) -> Result<Vec<RetrievalHit>, DatastoreError> {
        if query.dim() != self.dim() {
            return Err(DatastoreError::DimMismatch {
                expected: self.dim(),
                actual: query.dim(),
            });
        }
        if k == 0 {
            return Err(DatastoreError::ZeroK);
        }
        let mut heap: BinaryHeap<Ranked<'_>> = BinaryHeap::with_capacity(k + 1);
        for entry in &self.entries {
            if exclude.contains(&entry.entry_id) {
                continue;
            }
            let item = Ranked {
                score: query.cosine(&entry.embedding),
                entry,
            };
            if heap.len() < k {
                heap.push(item);
            } else if let Some(worst) = heap.peek() {
                if item < *worst {
                    heap.pop();
                    heap.push(item);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|r| RetrievalHit {
                entry_id: r.entry.entry_id.clone(),
                text: r.entry.text.clone(),
                score: r.score,
            })
            .collect())
    }

    /// Union of two datastores built with the same encoder settings. Entry ids
    /// are prefixed with the owning store's name to keep them unique.
    pub fn merge(a: &Datastore, b: &Datastore) -> Result<Datastore, DatastoreError> {
        if a.encoder_config != b.encoder_config {
            return Err(DatastoreError::ConfigMismatch);
        }
        let entries = [a, b]
            .iter()
            .flat_map(|store| {
                store.entries.iter().map(|e| CaptionEntry {
                    entry_id: format!("{}:{}", store.name, e.entry_id),
                    ..e.clone()
                })
            })
            .collect();
        Datastore::from_entries(format!("{}+{}", a.name, b.name), a.encoder_config, entries)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u32(self.dim() as u32);
        w.u64(self.entries.len() as u64);
        w.u64(self.encoder_config.seed);
        w.f64(self.encoder_config.alpha);
        w.u32(self.encoder_config.dim as u32);
        for e in &self.entries {
            w.str(&e.entry_id);
            w.str(&e.text);
            w.str(&e.source);
            for &v in e.embedding.values() {
                w.f32(v);
            }
        }
        w.buf
    }

    pub fn from_bytes(name: impl Into<String>, bytes: &[u8]) -> Result<Self, DatastoreError> {
        let mut r = Reader::new(bytes);
        let magic = r.take(MAGIC.len()).map_err(|_| DatastoreError::BadMagic)?;
        if magic != MAGIC {
            return Err(DatastoreError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(DatastoreError::UnsupportedVersion(version));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let seed = r.u64()?;
        let alpha = r.f64()?;
        let config_dim = r.u32()? as usize;
        if config_dim != dim {
            return Err(DatastoreError::Corrupt(format!(
                "header dim {dim} disagrees with encoder dim {config_dim}"
            )));
        }
        let encoder_config = EncoderConfig { dim, seed, alpha };
        // Every entry needs at least three length prefixes and its vector.
        let min_entry = 12 + 4 * dim as u64;
        if count.saturating_mul(min_entry) > r.remaining() as u64 {
            return Err(DatastoreError::Truncated);
        }
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let entry_id = r.str()?;
            let text = r.str()?;
            let source = r.str()?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(r.f32()?);
            }
            let embedding = Embedding::new(values)?;
            entries.push(CaptionEntry {
                entry_id,
                text,
                embedding,
                source,
            });
        }
        if r.remaining() != 0 {
            return Err(DatastoreError::Corrupt(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        Datastore::from_entries(name, encoder_config, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatastoreError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Loads a datastore; its name is the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatastoreError> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_bytes(name, &bytes)
    }
}
