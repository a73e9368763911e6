//! Conditioning prompts built from retrieved captions.
//!
//! Template: `Audios similar to this audio sounds like: c1, c2, ..., ck. This audio sounds like:`
//! With nothing retrieved the prompt is just the final clause.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{Datastore, DatastoreError};
use crate::toyclap::{AudioSample, EncoderError, ToyClap};

pub const PREFIX: &str = "Audios similar to this audio sounds like: ";
pub const SEPARATOR: &str = ", ";
pub const SUFFIX: &str = "This audio sounds like:";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("caption {0} is blank")]
    BlankCaption(usize),
    #[error("text is not a prompt produced by this template")]
    NotAPrompt,
    #[error("encoder config of the datastore differs from the encoder in use")]
    EncoderMismatch,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptText {
    pub text: String,
    pub retrieved_ids: Vec<String>,
    pub k_used: usize,
}

/// Formats captions into the prompt template. Captions are inserted verbatim.
pub fn build_prompt<S: AsRef<str>>(captions: &[S]) -> Result<String, PromptError> {
    if let Some(i) = captions.iter().position(|c| c.as_ref().trim().is_empty()) {
        return Err(PromptError::BlankCaption(i));
    }
    if captions.is_empty() {
        return Ok(SUFFIX.to_owned());
    }
    let joined = captions
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(SEPARATOR);
    Ok(format!("{PREFIX}{joined}. {SUFFIX}"))
}

/// Inverse of [`build_prompt`] for captions that do not contain `", "`.
pub fn parse_prompt(prompt: &str) -> Result<Vec<String>, PromptError> {
    if prompt == SUFFIX {
        return Ok(Vec::new());
    }
    let body = prompt
        .strip_prefix(PREFIX)
        .and_then(|rest| rest.strip_suffix(SUFFIX))
        .and_then(|rest| rest.strip_suffix(". "))
        .ok_or(PromptError::NotAPrompt)?;
    Ok(body.split(SEPARATOR).map(str::to_owned).collect())
}

/// Embeds the audio, retrieves its nearest captions (skipping `exclude`) and
/// wraps them in the template, best match first.
pub fn retrieve_and_prompt(
    sample: &AudioSample,
    encoder: &ToyClap,
    store: &Datastore,
    cfg: &RetrievalConfig,
    exclude: &HashSet<String>,
) -> Result<PromptText, PromptError> {
    if store.encoder_config() != encoder.config() {
        return Err(PromptError::EncoderMismatch);
    }
    let query = encoder.embed_audio(sample)?;
    let hits = store.query_topk(&query, cfg.k, exclude)?;
    let text = build_prompt(&hits.iter().map(|h| h.text.as_str()).collect::<Vec<_>>())?;
    Ok(PromptText {
        text,
        k_used: hits.len(),
        retrieved_ids: hits.into_iter().map(|h| h.entry_id).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyclap::{EncoderConfig, EventToken};

    #[test]
    fn template_instantiation() {
        assert_eq!(
            build_prompt(&["a dog barks", "rain falls"]).unwrap(),
            "Audios similar to this audio sounds like: a dog barks, rain falls. This audio sounds like:"
        );
        assert_eq!(build_prompt::<&str>(&[]).unwrap(), "This audio sounds like:");
        assert_eq!(
            build_prompt(&["x"]).unwrap(),
            "Audios similar to this audio sounds like: x. This audio sounds like:"
        );
    }

    #[test]
    fn blank_caption_rejected() {
        assert!(matches!(build_prompt(&["ok", "  "]), Err(PromptError::BlankCaption(1))));
    }

    #[test]
    fn parse_round_trip_and_reject() {
        let caps = vec!["a b.".to_string(), "c".to_string()];
        assert_eq!(parse_prompt(&build_prompt(&caps).unwrap()).unwrap(), caps);
        assert!(parse_prompt("hello").is_err());
        assert!(parse_prompt(SUFFIX).unwrap().is_empty());
    }

    fn setup() -> (ToyClap, Datastore, AudioSample) {
        let enc = ToyClap::new(EncoderConfig { dim: 32, seed: 1, alpha: 0.1 }, ["dog_bark", "rain", "siren"]).unwrap();
        let caps = [
            ("a dog_bark nearby", "train"),
            ("rain and a dog_bark", "train"),
            ("a siren passes", "train"),
            ("rain on glass", "train"),
            ("dog_bark echoes", "train"),
        ];
        let store = Datastore::build("s", &caps, &enc).unwrap();
        let sample = AudioSample::new("x", vec![EventToken::new("dog_bark").unwrap()], "d");
        (enc, store, sample)
    }

    #[test]
    fn k_four_gives_four_captions_in_score_order() {
        let (enc, store, sample) = setup();
        let p = retrieve_and_prompt(&sample, &enc, &store, &RetrievalConfig::default(), &HashSet::new()).unwrap();
        assert_eq!(p.k_used, 4);
        let caps = parse_prompt(&p.text).unwrap();
        assert_eq!(caps.len(), 4);
        let hits = store.query_topk(&enc.embed_audio(&sample).unwrap(), 4, &HashSet::new()).unwrap();
        assert_eq!(caps, hits.iter().map(|h| h.text.clone()).collect::<Vec<_>>());
        assert_eq!(p.retrieved_ids, hits.iter().map(|h| h.entry_id.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn exclusion_and_short_store() {
        let (enc, store, sample) = setup();
        let exclude: HashSet<String> = ["000000", "000001", "000004"].iter().map(|s| s.to_string()).collect();
        let p = retrieve_and_prompt(&sample, &enc, &store, &RetrievalConfig { k: 4 }, &exclude).unwrap();
        assert_eq!(p.k_used, 2);
        assert!(p.retrieved_ids.iter().all(|id| !exclude.contains(id)));
        assert!(!p.text.contains("dog_bark"));
    }
}
