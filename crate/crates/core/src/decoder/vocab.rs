use std::collections::HashMap;

use super::DecoderError;
use crate::text;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

/// Word-level vocabulary. Ids 0-3 are reserved for BOS, EOS, PAD and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Words seen at least `min_count` times, most frequent first, ties in
    /// lexicographic order. Texts are split with [`text::decoder_tokens`].
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self, DecoderError> {
        if corpus.is_empty() {
            return Err(DecoderError::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in text::decoder_tokens(line.as_ref()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !SPECIALS.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(ranked.into_iter().map(|(w, _)| w))
    }

    /// Rebuilds a vocabulary from non-special words in id order.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self, DecoderError> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let mut index = HashMap::with_capacity(all.len());
        for (i, w) in all.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(DecoderError::Vocabulary(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self { words: all, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or(SPECIALS[UNK as usize])
    }

    /// Non-special words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[SPECIALS.len()..]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text::decoder_tokens(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> = ids.iter().map(|&i| self.word(i)).collect();
        text::detokenize(&toks)
    }
}
