//! Glue between the corpus, encoder, datastore, prompt builder and decoder:
//! building teacher-forced examples, the two training stages, and evaluation.
//!
//! Training runs in two stages. The base language model is first fit on
//! prompted caption text with no audio attached, standing in for a
//! pretrained text decoder. Its weights are then frozen and only the
//! cross-attention adapters learn to use the audio.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DatasetSample;
use crate::datastore::{Datastore, DatastoreError, RetrievalHit};
use crate::decoder::{
    self, DecoderConfig, DecoderError, DecoderParams, Example, FreezeMask, Strategy, TokenSeq,
    TrainConfig, Vocabulary,
};
use crate::metrics::{evaluate_corpus, EvalPair, MetricError, MetricReport};
use crate::prompting::{build_prompt, PromptError, PromptText, RetrievalConfig, SUFFIX};
use crate::toyclap::{EncoderConfig, EncoderError, ToyClap};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no samples")]
    NoSamples,
    #[error("caption of {id} needs {len} tokens, more than max length {max} allows")]
    CaptionTooLong { id: String, len: usize, max: usize },
}

/// Architecture knobs; vocabulary size and encoder width come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub gate_init: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            max_len: 128,
            gate_init: 0.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn decoder_config(&self, vocab: &Vocabulary, encoder: &EncoderConfig) -> DecoderConfig {
        DecoderConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            vocab_size: vocab.len(),
            enc_dim: encoder.dim,
            gate_init: self.gate_init,
        }
    }
}

/// Which reference captions of a sample become training targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum References {
    #[default]
    All,
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionerConfig {
    pub model: ModelConfig,
    pub retrieval: RetrievalConfig,
    /// Base language-model stage; zero epochs skips it.
    pub pretrain: TrainConfig,
    /// Adapter stage.
    pub train: TrainConfig,
    pub references: References,
    pub pretrain_references: References,
    /// Hide every reference of the current sample from its own prompt.
    pub exclude_siblings: bool,
    pub max_new: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            retrieval: RetrievalConfig::default(),
            pretrain: TrainConfig {
                lr: 3e-3,
                epochs: 20,
                batch_size: 16,
                ..TrainConfig::default()
            },
            train: TrainConfig::default(),
            references: References::All,
            pretrain_references: References::All,
            exclude_siblings: true,
            max_new: 32,
        }
    }
}

/// Vocabulary over every caption in `samples` plus the prompt template.
pub fn build_vocabulary<'a>(
    samples: impl IntoIterator<Item = &'a DatasetSample>,
) -> Result<Vocabulary, DecoderError> {
    let mut corpus = vec![build_prompt(&["x", "y"]).expect("non-blank")];
    for s in samples {
        corpus.extend(s.captions.iter().cloned());
    }
    Vocabulary::build(&corpus, 1)
}

/// Encoder matching the store's settings, aware of the given event names.
pub fn encoder_for<I, S>(store: &Datastore, events: I) -> Result<ToyClap, EncoderError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    ToyClap::new(*store.encoder_config(), events)
}

/// Entry ids whose text equals one of `captions`.
pub fn sibling_ids<S: AsRef<str>>(store: &Datastore, captions: &[S]) -> HashSet<String> {
    let texts: HashSet<&str> = captions.iter().map(AsRef::as_ref).collect();
    store
        .entries()
        .iter()
        .filter(|e| texts.contains(e.text.as_str()))
        .map(|e| e.entry_id.clone())
        .collect()
}

/// Longest prefix of `hits` whose prompt encodes to at most `budget` tokens.
pub fn fit_prompt(
    hits: &[RetrievalHit],
    vocab: &Vocabulary,
    budget: usize,
) -> Result<(PromptText, Vec<u32>), PromptError> {
    let mut n = hits.len();
    loop {
        let text = build_prompt(&hits[..n].iter().map(|h| h.text.as_str()).collect::<Vec<_>>())?;
        let ids = vocab.encode(&text);
        if ids.len() <= budget || n == 0 {
            let prompt = PromptText {
                text,
                retrieved_ids: hits[..n].iter().map(|h| h.entry_id.clone()).collect(),
                k_used: n,
            };
            return Ok((prompt, ids));
        }
        n -= 1;
    }
}

fn exclusions(store: &Datastore, sample: &DatasetSample, on: bool) -> HashSet<String> {
    if on {
        sibling_ids(store, &sample.captions)
    } else {
        HashSet::new()
    }
}

fn targets(sample: &DatasetSample, refs: References) -> &[String] {
    match refs {
        References::All => &sample.captions,
        References::First => &sample.captions[..1],
    }
}

fn sequence(
    sample: &DatasetSample,
    hits: &[RetrievalHit],
    caption: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSeq, PipelineError> {
    let cap = vocab.encode(caption);
    // Inputs are BOS + prompt + caption; the final EOS is only a target.
    let fixed = cap.len() + 1;
    let empty = vocab.encode(SUFFIX).len();
    if fixed + empty > max_len {
        return Err(PipelineError::CaptionTooLong {
            id: sample.audio.id.clone(),
            len: fixed + empty,
            max: max_len,
        });
    }
    let (_, prompt) = fit_prompt(hits, vocab, max_len - fixed)?;
    Ok(TokenSeq::with_prompt(&prompt, &cap))
}

/// Adapter-stage examples: prompts come from retrieval with the audio
/// embedding, and the audio hidden states are attached.
pub fn caption_examples<'a>(
    samples: impl IntoIterator<Item = &'a DatasetSample>,
    encoder: &ToyClap,
    store: &Datastore,
    vocab: &Vocabulary,
    cfg: &CaptionerConfig,
) -> Result<Vec<Example>, PipelineError> {
    if cfg.retrieval.k == 0 {
        return Err(PipelineError::ZeroK);
    }
    let mut out = Vec::new();
    for s in samples {
        let exclude = exclusions(store, s, cfg.exclude_siblings);
        let query = encoder.embed_audio(&s.audio)?;
        let hits = store.query_topk(&query, cfg.retrieval.k, &exclude)?;
        let hidden = encoder.audio_hidden_states(&s.audio)?;
        for caption in targets(s, cfg.references) {
            out.push(Example {
                seq: sequence(s, &hits, caption, vocab, cfg.model.max_len)?,
                hidden: Some(hidden.clone()),
            });
        }
    }
    Ok(out)
}

/// Base-stage examples: each caption is prompted with its nearest captions
/// by text embedding, with no audio attached.
pub fn text_examples<'a>(
    samples: impl IntoIterator<Item = &'a DatasetSample>,
    encoder: &ToyClap,
    store: &Datastore,
    vocab: &Vocabulary,
    cfg: &CaptionerConfig,
) -> Result<Vec<Example>, PipelineError> {
    if cfg.retrieval.k == 0 {
        return Err(PipelineError::ZeroK);
    }
    let mut out = Vec::new();
    for s in samples {
        let exclude = exclusions(store, s, cfg.exclude_siblings);
        for caption in targets(s, cfg.pretrain_references) {
            let query = encoder.embed_text(caption)?;
            let hits = store.query_topk(&query, cfg.retrieval.k, &exclude)?;
            out.push(Example {
                seq: sequence(s, &hits, caption, vocab, cfg.model.max_len)?,
                hidden: None,
            });
        }
    }
    Ok(out)
}

/// Datastore of every reference caption of `samples`, tagged with `source`.
pub fn caption_store<'a>(
    name: &str,
    source: &str,
    samples: impl IntoIterator<Item = &'a DatasetSample>,
    encoder: &ToyClap,
) -> Result<Datastore, DatastoreError> {
    let pairs: Vec<(&str, &str)> = samples
        .into_iter()
        .flat_map(|s| s.captions.iter().map(|c| (c.as_str(), source)))
        .collect();
    Datastore::build(name, &pairs, encoder)
}

#[derive(Debug, Clone)]
pub struct Captioner {
    pub params: DecoderParams,
    pub vocab: Vocabulary,
    pub pretrain_losses: Vec<f64>,
    pub train_losses: Vec<f64>,
}

/// Which stage an epoch callback refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Train,
}

/// Full two-stage training.
///
/// `lm_samples` feed the base stage with prompts from a store built over
/// their own captions; `train_samples` feed the adapter stage with prompts
/// from `store`. `vocab` must cover both.
#[allow(clippy::too_many_arguments)]
pub fn train_captioner<'a>(
    lm_samples: &[&'a DatasetSample],
    train_samples: &[&'a DatasetSample],
    encoder: &ToyClap,
    store: &Datastore,
    vocab: Vocabulary,
    cfg: &CaptionerConfig,
    mut on_epoch: impl FnMut(Stage, usize, f64),
) -> Result<Captioner, PipelineError> {
    if train_samples.is_empty() {
        return Err(PipelineError::NoSamples);
    }
    let dcfg = cfg.model.decoder_config(&vocab, encoder.config());
    let mut params = DecoderParams::init(&dcfg, cfg.model.init_seed)?;
    let mut pretrain_losses = Vec::new();
    if cfg.pretrain.epochs > 0 && !lm_samples.is_empty() {
        let lm_store = caption_store("pretrain", "pretrain", lm_samples.iter().copied(), encoder)?;
        let examples = text_examples(lm_samples.iter().copied(), encoder, &lm_store, &vocab, cfg)?;
        let outcome = decoder::train(params, &examples, FreezeMask::BASE, &cfg.pretrain, |e, l, _| {
            on_epoch(Stage::Pretrain, e, l)
        })?;
        params = outcome.params;
        pretrain_losses = outcome.epoch_losses;
    }
    let examples = caption_examples(train_samples.iter().copied(), encoder, store, &vocab, cfg)?;
    let outcome = decoder::train(params, &examples, FreezeMask::ADAPTERS, &cfg.train, |e, l, _| {
        on_epoch(Stage::Train, e, l)
    })?;
    Ok(Captioner {
        params: outcome.params,
        vocab,
        pretrain_losses,
        train_losses: outcome.epoch_losses,
    })
}

/// One evaluated sample, as written to the generations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generation {
    pub id: String,
    pub retrieved: Vec<String>,
    pub prompt: String,
    pub output: String,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub generations: Vec<Generation>,
}

/// Prompt for generation, leaving room for `max_new` tokens when the context
/// allows it. Test-time callers pass an empty exclusion set.
#[allow(clippy::too_many_arguments)]
pub fn inference_prompt(
    sample: &DatasetSample,
    encoder: &ToyClap,
    store: &Datastore,
    vocab: &Vocabulary,
    k: usize,
    max_len: usize,
    max_new: usize,
    exclude: &HashSet<String>,
) -> Result<PromptText, PipelineError> {
    if k == 0 {
        return Err(PipelineError::ZeroK);
    }
    let query = encoder.embed_audio(&sample.audio)?;
    let hits = store.query_topk(&query, k, exclude)?;
    let room = max_len.saturating_sub(1);
    let min_prompt = vocab.encode(SUFFIX).len();
    let budget = room.saturating_sub(max_new).max(min_prompt.min(room));
    let (prompt, ids) = fit_prompt(&hits, vocab, budget)?;
    if ids.len() > room {
        return Err(DecoderError::TooLong {
            len: ids.len() + 1,
            max: max_len,
        }
        .into());
    }
    Ok(prompt)
}

/// Greedy captioning of every sample, scored against its references.
/// Samples are processed in parallel; results keep input order.
pub fn evaluate(
    params: &DecoderParams,
    vocab: &Vocabulary,
    encoder: &ToyClap,
    store: &Datastore,
    samples: &[&DatasetSample],
    k: usize,
    max_new: usize,
) -> Result<Evaluation, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::NoSamples);
    }
    let generations = samples
        .par_iter()
        .map(|s| {
            let prompt = inference_prompt(
                s,
                encoder,
                store,
                vocab,
                k,
                params.config.max_len,
                max_new,
                &HashSet::new(),
            )?;
            let hidden = encoder.audio_hidden_states(&s.audio)?;
            let output =
                decoder::generate(params, vocab, &prompt.text, &hidden, max_new, Strategy::Greedy)?;
            Ok(Generation {
                id: s.audio.id.clone(),
                retrieved: prompt.retrieved_ids,
                prompt: prompt.text,
                output,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let pairs: Vec<EvalPair> = generations
        .iter()
        .zip(samples)
        .map(|(g, s)| EvalPair::from_text(&g.output, &s.captions))
        .collect();
    Ok(Evaluation {
        report: evaluate_corpus(&pairs)?,
        generations,
    })
}

/// `epoch,mean_loss` CSV.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{l:.6}\n", i + 1));
    }
    out
}
