//! JSON config files. Unknown keys are rejected; relative paths are resolved
//! against the directory of the file that names them.

use std::fs;
use std::path::{Path, PathBuf};

use recap_core::corpus::{DomainSpec, GenConfig, Split};
use recap_core::decoder::TrainConfig;
use recap_core::pipeline::CaptionerConfig;
use recap_core::toyclap::EncoderConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Reads a config file, or returns the default when no path is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, PathBuf), CliError> {
    let Some(path) = path else {
        return Ok((T::default(), PathBuf::from(".")));
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Path that must point at an existing file.
pub fn input_file(what: &str, p: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let p = p.ok_or_else(|| CliError::Config(format!("no {what} given")))?;
    if !p.is_file() {
        return Err(CliError::Config(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub generation: GenConfig,
    pub domains: Vec<DomainSpec>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            generation: GenConfig::default(),
            domains: vec![DomainSpec::city(), DomainSpec::forest()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatastoreConfig {
    pub dataset: Option<PathBuf>,
    pub split: Option<Split>,
    /// Empty keeps every domain.
    pub domains: Vec<String>,
    pub encoder: EncoderConfig,
    /// Source tag recorded on every entry; defaults to the split name.
    pub source: Option<String>,
    /// Existing datastore files merged into the new one.
    pub merge: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub dataset: Option<PathBuf>,
    pub datastore: Option<PathBuf>,
    /// Domains whose train split feeds the adapter stage. Empty means all.
    pub domains: Vec<String>,
    /// Domains whose train split feeds the base stage. Empty means all.
    pub lm_domains: Vec<String>,
    pub captioner: CaptionerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub datastore: Option<PathBuf>,
    pub split: Split,
    pub domains: Vec<String>,
    pub k: usize,
    pub max_new: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            datastore: None,
            split: Split::Test,
            domains: Vec::new(),
            k: 4,
            max_new: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Train and evaluate on the evaluation domain.
    InDomain,
    /// Train on the training domain, evaluate on the evaluation domain.
    CrossDomain,
    /// Train on both.
    Combined,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::InDomain => "in_domain",
            Regime::CrossDomain => "cross_domain",
            Regime::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Captions of the run's training samples.
    TrainSet,
    /// Train-split captions of the evaluation domain.
    EvalSet,
    /// Both of the above.
    Merged,
    /// A datastore file built beforehand.
    ExternalFile,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::TrainSet => "train_set",
            Variant::EvalSet => "eval_set",
            Variant::Merged => "merged",
            Variant::ExternalFile => "external_file",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub corpus: CorpusConfig,
    pub train_domain: String,
    pub eval_domain: String,
    pub regimes: Vec<Regime>,
    pub variants: Vec<Variant>,
    pub external_file: Option<PathBuf>,
    pub k: usize,
    /// Each seed drives corpus generation, initialisation and batching.
    pub seeds: Vec<u64>,
    pub encoder: EncoderConfig,
    pub captioner: CaptionerConfig,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        let mut corpus = CorpusConfig::default();
        corpus.generation.samples_per_domain = 200;
        Self {
            corpus,
            train_domain: "city".into(),
            eval_domain: "forest".into(),
            regimes: vec![Regime::InDomain, Regime::CrossDomain, Regime::Combined],
            variants: vec![Variant::TrainSet, Variant::EvalSet, Variant::Merged],
            external_file: None,
            k: 4,
            seeds: vec![0, 1, 2],
            encoder: EncoderConfig::default(),
            captioner: CaptionerConfig {
                train: TrainConfig {
                    lr: 1e-3,
                    epochs: 20,
                    batch_size: 32,
                    ..TrainConfig::default()
                },
                ..CaptionerConfig::default()
            },
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), CliError> {
        let err = |m: &str| Err(CliError::Config(m.to_owned()));
        if self.k == 0 {
            return err("k must be at least 1");
        }
        if self.seeds.is_empty() {
            return err("no seeds");
        }
        if self.regimes.is_empty() || self.variants.is_empty() {
            return err("empty regime or variant list");
        }
        if self.variants.contains(&Variant::ExternalFile) && self.external_file.is_none() {
            return err("variant external_file needs external_file set");
        }
        for d in [&self.train_domain, &self.eval_domain] {
            if !self.corpus.domains.iter().any(|s| &s.name == d) {
                return Err(CliError::Config(format!("domain {d:?} is not in the corpus config")));
            }
        }
        Ok(())
    }
}
