//! Synthetic multi-domain captioning corpora.
//!
//! Each domain owns a pool of event names and caption templates. A sample is
//! 1-4 events drawn from its domain (occasionally from a pool shared across
//! domains) plus five distinct reference captions rendered from the templates.
//! Samples are split 70/15/15 per domain.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toyclap::{AudioSample, EventToken};

pub const REFS_PER_SAMPLE: usize = 5;
pub const SLOT: &str = "{event}";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid domain {domain:?}: {reason}")]
    InvalidDomain { domain: String, reason: String },
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("sample {id}: cannot render {REFS_PER_SAMPLE} distinct captions")]
    TooFewRenderings { id: String },
    #[error("split {0} has no multi-event sample")]
    NoCompositional(Split),
    #[error("only {fraction:.2} of {target} test events are unseen in {source_domain} training data")]
    NotNovel {
        source_domain: String,
        target: String,
        fraction: f64,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, dev or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub events: Vec<EventToken>,
    pub templates: Vec<String>,
    /// Events this domain shares with others; drawn with the overlap fraction.
    #[serde(default)]
    pub shared_events: Vec<EventToken>,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |reason: String| CorpusError::InvalidDomain {
            domain: self.name.clone(),
            reason,
        };
        if self.name.is_empty() {
            return Err(bad("empty name".into()));
        }
        if self.events.len() < 5 {
            return Err(bad(format!("{} events, need at least 5", self.events.len())));
        }
        if self.templates.len() < 2 {
            return Err(bad(format!("{} templates, need at least 2", self.templates.len())));
        }
        if let Some(t) = self.templates.iter().find(|t| !t.contains(SLOT)) {
            return Err(bad(format!("template {t:?} has no {SLOT} slot")));
        }
        Ok(())
    }

    pub fn city() -> Self {
        Self::from_lists(
            "city",
            &[
                "car_horn", "siren", "engine_idle", "footsteps", "jackhammer", "bus_brakes",
                "bicycle_bell", "crowd_chatter", "traffic_hum", "subway_train", "street_music",
                "door_slam",
            ],
            &[
                "a {event} can be heard on a busy street",
                "the sound of {event} in the city",
                "{event} echoes between tall buildings",
                "an urban recording with {event}",
                "downtown {event} is heard nearby",
                "people walk past while {event} plays out",
            ],
            &["speech", "wind", "rain", "dog_bark"],
        )
    }

    pub fn forest() -> Self {
        Self::from_lists(
            "forest",
            &[
                "frog_croak", "bird_song", "owl_hoot", "stream_flow", "leaves_rustle", "woodpecker",
                "cricket_chirp", "branch_snap", "waterfall", "insect_buzz", "wolf_howl",
                "thunder_rumble",
            ],
            &[
                "in the forest {event} can be heard",
                "nature sounds with {event}",
                "{event} in a quiet woodland",
                "an outdoor recording of {event} near trees",
                "deep in the woods {event} is audible",
                "a calm wilderness scene with {event}",
            ],
            &["speech", "wind", "rain", "dog_bark"],
        )
    }

    fn from_lists(name: &str, events: &[&str], templates: &[&str], shared: &[&str]) -> Self {
        let tok = |s: &&str| EventToken::new(*s).expect("built-in event names are valid");
        Self {
            name: name.to_owned(),
            events: events.iter().map(tok).collect(),
            templates: templates.iter().map(|t| t.to_string()).collect(),
            shared_events: shared.iter().map(tok).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub samples_per_domain: usize,
    pub min_events: usize,
    pub max_events: usize,
    /// Probability that an event slot draws from the shared pool.
    pub overlap_fraction: f64,
    /// Minimum fraction of each domain's distinct test events unseen in every
    /// other domain's training split. 0 disables the check.
    pub min_novelty: f64,
    /// Require a multi-event sample in every split.
    pub require_compositional: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples_per_domain: 100,
            min_events: 1,
            max_events: 4,
            overlap_fraction: 0.2,
            min_novelty: 0.5,
            require_compositional: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let err = |m: String| Err(CorpusError::InvalidConfig(m));
        if self.samples_per_domain == 0 {
            return err("samples_per_domain must be positive".into());
        }
        if self.min_events < 1 || self.min_events > self.max_events || self.max_events > 4 {
            return err(format!(
                "events per sample range [{}, {}] must lie within [1, 4]",
                self.min_events, self.max_events
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return err(format!("overlap_fraction {} outside [0, 1]", self.overlap_fraction));
        }
        if !(0.0..=1.0).contains(&self.min_novelty) {
            return err(format!("min_novelty {} outside [0, 1]", self.min_novelty));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub audio: AudioSample,
    pub captions: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<DatasetSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    domain: String,
    events: Vec<EventToken>,
    captions: Vec<String>,
    split: Split,
}

fn render(template: &str, events: &[EventToken]) -> String {
    let joined = events.iter().map(EventToken::as_str).collect::<Vec<_>>().join(" and ");
    template.replace(SLOT, &joined)
}

fn permutations(events: &[EventToken]) -> Vec<Vec<EventToken>> {
    if events.len() <= 1 {
        return vec![events.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..events.len() {
        let mut rest = events.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}

/// Five distinct captions: templates in the sample's event order first, then
/// other event orders if the templates alone are not enough.
fn render_references(
    id: &str,
    events: &[EventToken],
    templates: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>, CorpusError> {
    let mut order: Vec<&String> = templates.iter().collect();
    order.shuffle(rng);
    let mut out: Vec<String> = Vec::with_capacity(REFS_PER_SAMPLE);
    let push = |c: String, out: &mut Vec<String>| {
        if out.len() < REFS_PER_SAMPLE && !out.contains(&c) {
            out.push(c);
        }
    };
    for t in &order {
        push(render(t, events), &mut out);
    }
    if out.len() < REFS_PER_SAMPLE {
        let mut perms = permutations(events);
        perms.shuffle(rng);
        for p in &perms {
            for t in &order {
                push(render(t, p), &mut out);
            }
        }
    }
    if out.len() < REFS_PER_SAMPLE {
        return Err(CorpusError::TooFewRenderings { id: id.to_owned() });
    }
    Ok(out)
}

impl Dataset {
    pub fn from_samples(samples: Vec<DatasetSample>) -> Result<Self, CorpusError> {
        let mut ids = HashSet::new();
        for s in &samples {
            if !ids.insert(s.audio.id.as_str()) {
                return Err(CorpusError::DuplicateId(s.audio.id.clone()));
            }
        }
        Ok(Self { samples })
    }

    /// Deterministic synthetic corpus over `domains`.
    pub fn generate(domains: &[DomainSpec], cfg: &GenConfig) -> Result<Self, CorpusError> {
        cfg.validate()?;
        if domains.is_empty() {
            return Err(CorpusError::InvalidConfig("no domains".into()));
        }
        let mut names = HashSet::new();
        for d in domains {
            d.validate()?;
            if !names.insert(d.name.as_str()) {
                return Err(CorpusError::InvalidConfig(format!("duplicate domain {:?}", d.name)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut samples = Vec::with_capacity(domains.len() * cfg.samples_per_domain);
        for domain in domains {
            let mut block = Vec::with_capacity(cfg.samples_per_domain);
            for i in 0..cfg.samples_per_domain {
                let id = format!("{}-{:04}", domain.name, i);
                let n = rng.random_range(cfg.min_events..=cfg.max_events);
                let mut events: Vec<EventToken> = Vec::with_capacity(n);
                while events.len() < n {
                    let shared = !domain.shared_events.is_empty()
                        && rng.random_bool(cfg.overlap_fraction);
                    let pool = if shared { &domain.shared_events } else { &domain.events };
                    let pick = pool[rng.random_range(0..pool.len())].clone();
                    if !events.contains(&pick) {
                        events.push(pick);
                    }
                }
                let captions = render_references(&id, &events, &domain.templates, &mut rng)?;
                block.push(DatasetSample {
                    audio: AudioSample::new(id, events, domain.name.clone()),
                    captions,
                    split: Split::Train,
                });
            }
            let mut order: Vec<usize> = (0..block.len()).collect();
            order.shuffle(&mut rng);
            let n_eval = block.len() * 15 / 100;
            for (rank, &idx) in order.iter().enumerate() {
                block[idx].split = if rank < n_eval {
                    Split::Test
                } else if rank < 2 * n_eval {
                    Split::Dev
                } else {
                    Split::Train
                };
            }
            samples.extend(block);
        }
        let dataset = Dataset { samples };
        if cfg.require_compositional && cfg.max_events >= 2 {
            for split in Split::ALL {
                let mut members = dataset.split(split).peekable();
                if members.peek().is_some() && !members.any(|s| s.audio.events.len() >= 2) {
                    return Err(CorpusError::NoCompositional(split));
                }
            }
        }
        if cfg.min_novelty > 0.0 {
            for source in domains {
                for target in domains.iter().filter(|d| d.name != source.name) {
                    let fraction = dataset.novelty(&source.name, &target.name);
                    if fraction < cfg.min_novelty {
                        return Err(CorpusError::NotNovel {
                            source_domain: source.name.clone(),
                            target: target.name.clone(),
                            fraction,
                        });
                    }
                }
            }
        }
        Ok(dataset)
    }

    pub fn samples(&self) -> &[DatasetSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&DatasetSample> {
        self.samples.iter().find(|s| s.audio.id == id)
    }

    /// Domain names in first-appearance order.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.audio.domain) {
                out.push(s.audio.domain.clone());
            }
        }
        out
    }

    /// Every event name that occurs in the corpus.
    pub fn event_names(&self) -> BTreeSet<String> {
        self.samples
            .iter()
            .flat_map(|s| s.audio.events.iter().map(|e| e.as_str().to_owned()))
            .collect()
    }

    /// Fraction of distinct events in `target`'s test split that never occur
    /// in `source`'s training split.
    pub fn novelty(&self, source: &str, target: &str) -> f64 {
        let seen: HashSet<&EventToken> = self
            .split(Split::Train)
            .filter(|s| s.audio.domain == source)
            .flat_map(|s| &s.audio.events)
            .collect();
        let test: HashSet<&EventToken> = self
            .split(Split::Test)
            .filter(|s| s.audio.domain == target)
            .flat_map(|s| &s.audio.events)
            .collect();
        if test.is_empty() {
            return 1.0;
        }
        test.iter().filter(|e| !seen.contains(*e)).count() as f64 / test.len() as f64
    }

    /// Keeps only samples from the given domains.
    pub fn filter_domains<S: AsRef<str>>(&self, domains: &[S]) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| domains.iter().any(|d| d.as_ref() == s.audio.domain))
                .cloned()
                .collect(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let rec = Record {
                id: s.audio.id.clone(),
                domain: s.audio.domain.clone(),
                events: s.audio.events.clone(),
                captions: s.captions.clone(),
                split: s.split,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self, CorpusError> {
        let mut samples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| CorpusError::Parse {
                line: line_no,
                message,
            };
            let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            if rec.captions.len() != REFS_PER_SAMPLE {
                return Err(parse_err(format!(
                    "expected {REFS_PER_SAMPLE} captions, found {}",
                    rec.captions.len()
                )));
            }
            if rec.events.is_empty() {
                return Err(parse_err("sample has no events".into()));
            }
            if rec.captions.iter().any(|c| c.trim().is_empty()) {
                return Err(parse_err("empty caption".into()));
            }
            samples.push(DatasetSample {
                audio: AudioSample::new(rec.id, rec.events, rec.domain),
                captions: rec.captions,
                split: rec.split,
            });
        }
        Dataset::from_samples(samples)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::from_jsonl(BufReader::new(fs::File::open(path)?))
    }
}
