//! One function per subcommand. Each returns a short human-readable summary.

use std::fs;
use std::path::{Path, PathBuf};

use recap_core::corpus::{Dataset, DatasetSample, Split};
use recap_core::datastore::Datastore;
use recap_core::decoder::Checkpoint;
use recap_core::pipeline::{self, Generation};
use recap_core::toyclap::ToyClap;

use crate::config::*;
use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

pub fn generations_jsonl(generations: &[Generation]) -> String {
    let mut out = String::new();
    for g in generations {
        out.push_str(&serde_json::to_string(g).expect("plain struct"));
        out.push('\n');
    }
    out
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::load_jsonl(path)?)
}

fn load_store(path: &Path) -> Result<Datastore, CliError> {
    Ok(Datastore::load(path)?)
}

fn select<'a>(ds: &'a Dataset, split: Split, domains: &[String]) -> Vec<&'a DatasetSample> {
    ds.split(split)
        .filter(|s| domains.is_empty() || domains.contains(&s.audio.domain))
        .collect()
}

pub fn gen_corpus(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<String, CliError> {
    let (mut cfg, _) = load_config::<CorpusConfig>(config)?;
    if let Some(seed) = seed {
        cfg.generation.seed = seed;
    }
    let ds = Dataset::generate(&cfg.domains, &cfg.generation)?;
    write_file(out, ds.to_jsonl())?;
    Ok(format!("wrote {} samples to {}", ds.len(), out.display()))
}

#[derive(Debug, Default)]
pub struct DatastoreArgs {
    pub dataset: Option<PathBuf>,
    pub split: Option<Split>,
    pub merge: Vec<PathBuf>,
}

pub fn build_datastore(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    args: DatastoreArgs,
) -> Result<String, CliError> {
    let (mut cfg, base) = load_config::<DatastoreConfig>(config)?;
    if let Some(seed) = seed {
        cfg.encoder.seed = seed;
    }
    let dataset = input_file("dataset", args.dataset.or(cfg.dataset.map(|p| resolve(&base, &p))))?;
    let split = args.split.or(cfg.split).unwrap_or(Split::Train);
    let ds = load_dataset(&dataset)?;
    let samples = select(&ds, split, &cfg.domains);
    if samples.is_empty() {
        return Err(CliError::Data(format!("no {split} samples in {}", dataset.display())));
    }
    let encoder = ToyClap::new(cfg.encoder, ds.event_names()).map_err(|e| CliError::Config(e.to_string()))?;
    let name = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "store".into());
    let source = cfg.source.unwrap_or_else(|| split.to_string());
    let mut store = pipeline::caption_store(&name, &source, samples.iter().copied(), &encoder)?;
    let built = store.len();
    let merges = cfg.merge.iter().map(|p| resolve(&base, p)).chain(args.merge);
    for path in merges {
        let other = load_store(&input_file("datastore", Some(path))?)?;
        store = Datastore::merge(&store, &other)?;
    }
    write_file(out, store.to_bytes())?;
    Ok(format!(
        "wrote {} entries ({built} from the {split} split) to {}",
        store.len(),
        out.display()
    ))
}

#[derive(Debug, Default)]
pub struct TrainArgs {
    pub dataset: Option<PathBuf>,
    pub datastore: Option<PathBuf>,
}

/// Trains and writes `model.rcpt`, `loss.csv` and `pretrain_loss.csv` under `out`.
pub fn train(config: Option<&Path>, seed: Option<u64>, out: &Path, args: TrainArgs) -> Result<String, CliError> {
    let (mut cfg, base) = load_config::<TrainRunConfig>(config)?;
    if let Some(seed) = seed {
        cfg.captioner.model.init_seed = seed;
        cfg.captioner.pretrain.seed = seed;
        cfg.captioner.train.seed = seed;
    }
    let dataset = input_file("dataset", args.dataset.or(cfg.dataset.map(|p| resolve(&base, &p))))?;
    let store_path = input_file("datastore", args.datastore.or(cfg.datastore.map(|p| resolve(&base, &p))))?;
    let ds = load_dataset(&dataset)?;
    let store = load_store(&store_path)?;
    let events: Vec<String> = ds.event_names().into_iter().collect();
    let encoder = pipeline::encoder_for(&store, events.iter().cloned()).map_err(|e| CliError::Config(e.to_string()))?;
    let vocab = pipeline::build_vocabulary(ds.samples())?;
    let lm = select(&ds, Split::Train, &cfg.lm_domains);
    let samples = select(&ds, Split::Train, &cfg.domains);
    let captioner = pipeline::train_captioner(&lm, &samples, &encoder, &store, vocab, &cfg.captioner, |_, _, _| {})?;
    let ckpt = Checkpoint {
        params: captioner.params,
        vocab: captioner.vocab,
        encoder_config: *encoder.config(),
        events,
    };
    let bytes = ckpt.to_bytes();
    write_file(&out.join("model.rcpt"), &bytes)?;
    write_file(&out.join("loss.csv"), pipeline::loss_csv(&captioner.train_losses))?;
    write_file(&out.join("pretrain_loss.csv"), pipeline::loss_csv(&captioner.pretrain_losses))?;
    let last = captioner.train_losses.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "trained on {} samples, final loss {last:.4}\ncheckpoint {} sha256 {}",
        samples.len(),
        out.join("model.rcpt").display(),
        sha256_hex(&bytes)
    ))
}

#[derive(Debug, Default)]
pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub datastore: Option<PathBuf>,
    pub k: Option<usize>,
}

/// Greedy captioning of a split; writes `report.csv` and `generations.jsonl`
/// under `out`. The seed is accepted for symmetry; evaluation draws no
/// random numbers.
pub fn evaluate(config: Option<&Path>, _seed: Option<u64>, out: &Path, args: EvalArgs) -> Result<String, CliError> {
    let (cfg, base) = load_config::<EvalConfig>(config)?;
    let k = args.k.unwrap_or(cfg.k);
    if k == 0 {
        return Err(CliError::Config("k must be at least 1".into()));
    }
    let ckpt_path = input_file("checkpoint", args.checkpoint.or(cfg.checkpoint.map(|p| resolve(&base, &p))))?;
    let dataset = input_file("dataset", args.dataset.or(cfg.dataset.map(|p| resolve(&base, &p))))?;
    let store_path = input_file("datastore", args.datastore.or(cfg.datastore.map(|p| resolve(&base, &p))))?;

    let before = sha256_file(&ckpt_path)?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let ds = load_dataset(&dataset)?;
    let store = load_store(&store_path)?;
    let encoder = ToyClap::new(ckpt.encoder_config, ckpt.events.iter().cloned()).map_err(|e| CliError::Data(e.to_string()))?;
    if store.encoder_config() != encoder.config() {
        return Err(CliError::Config("datastore was built with a different encoder than the checkpoint".into()));
    }
    let samples = select(&ds, cfg.split, &cfg.domains);
    let ev = pipeline::evaluate(&ckpt.params, &ckpt.vocab, &encoder, &store, &samples, k, cfg.max_new)?;
    write_file(&out.join("report.csv"), ev.report.to_csv())?;
    write_file(&out.join("generations.jsonl"), generations_jsonl(&ev.generations))?;
    let after = sha256_file(&ckpt_path)?;
    if before != after {
        return Err(CliError::Io(format!("checkpoint {} changed during evaluation", ckpt_path.display())));
    }
    Ok(format!("{}\ncheckpoint sha256 {before}", ev.report))
}
