//! The regime by datastore-variant matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use recap_core::corpus::{Dataset, DatasetSample, Split};
use recap_core::datastore::Datastore;
use recap_core::decoder::Checkpoint;
use recap_core::metrics::{MetricReport, REPORT_METRICS};
use recap_core::pipeline;
use recap_core::toyclap::ToyClap;
use serde::{Deserialize, Serialize};

use crate::commands::{generations_jsonl, sha256_file, sha256_hex, write_file};
use crate::config::{load_config, resolve, ExperimentPlan, Regime, Variant};
use crate::error::CliError;

/// One evaluation of one checkpoint against one datastore.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub regime: Regime,
    pub variant: Variant,
    pub seed: u64,
    pub train_domains: Vec<String>,
    pub eval_domain: String,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub datastore: PathBuf,
    pub datastore_sha256: String,
    pub metrics: BTreeMap<String, f64>,
    pub pair_count: usize,
    pub generations: PathBuf,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn values(&self) -> Vec<f64> {
        REPORT_METRICS.iter().map(|m| self.metrics[*m]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub table: String,
    pub wall_clock_seconds: f64,
}

fn train_domains(plan: &ExperimentPlan, regime: Regime) -> Vec<String> {
    let mut out = match regime {
        Regime::InDomain => vec![plan.eval_domain.clone()],
        Regime::CrossDomain => vec![plan.train_domain.clone()],
        Regime::Combined => vec![plan.train_domain.clone(), plan.eval_domain.clone()],
    };
    out.dedup();
    out
}

fn datastore_label(variant: Variant, train: &[String], eval: &str, external: Option<&Path>) -> String {
    match variant {
        Variant::TrainSet => format!("DS({})", train.join("+")),
        Variant::EvalSet => format!("DS({eval})"),
        Variant::Merged => format!("DS({})+DS({eval})", train.join("+")),
        Variant::ExternalFile => format!(
            "file({})",
            external
                .and_then(Path::file_stem)
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        ),
    }
}

fn train_split<'a>(ds: &'a Dataset, domains: &[String]) -> Vec<&'a DatasetSample> {
    ds.split(Split::Train).filter(|s| domains.contains(&s.audio.domain)).collect()
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Runs the plan, writing every artifact under `out`:
/// `report.csv` (one row per run), `summary.csv` (means over seeds),
/// `table.txt`, `records.jsonl`, plus per-run generations, checkpoints and
/// datastores.
pub fn run_plan(plan: &ExperimentPlan, base: &Path, out: &Path, mut log: impl FnMut(&str)) -> Result<ExperimentOutcome, CliError> {
    plan.validate()?;
    let started = Instant::now();
    let external = match (&plan.external_file, plan.variants.contains(&Variant::ExternalFile)) {
        (Some(p), true) => Some(crate::config::input_file("external datastore", Some(resolve(base, p)))?),
        _ => None,
    };
    let mut records = Vec::new();
    for &seed in &plan.seeds {
        let mut gen = plan.corpus.generation.clone();
        gen.seed = seed;
        let ds = Dataset::generate(&plan.corpus.domains, &gen)?;
        write_file(&out.join(format!("corpus_seed{seed}.jsonl")), ds.to_jsonl())?;
        let events: Vec<String> = ds.event_names().into_iter().collect();
        let encoder = ToyClap::new(plan.encoder, events.iter().cloned()).map_err(|e| CliError::Config(e.to_string()))?;
        let vocab = pipeline::build_vocabulary(ds.samples())?;
        let lm: Vec<&DatasetSample> = ds.split(Split::Train).collect();
        let test: Vec<&DatasetSample> = ds
            .split(Split::Test)
            .filter(|s| s.audio.domain == plan.eval_domain)
            .collect();
        let eval_store = pipeline::caption_store("eval", "eval_set", train_split(&ds, std::slice::from_ref(&plan.eval_domain)), &encoder)?;

        let mut cfg = plan.captioner.clone();
        cfg.retrieval.k = plan.k;
        cfg.model.init_seed = seed;
        cfg.pretrain.seed = seed;
        cfg.train.seed = seed;

        // Regimes that train on the same domains share a checkpoint.
        let mut trained: BTreeMap<Vec<String>, (PathBuf, String, Datastore)> = BTreeMap::new();
        for &regime in &plan.regimes {
            let domains = train_domains(plan, regime);
            if !trained.contains_key(&domains) {
                let samples = train_split(&ds, &domains);
                let store = pipeline::caption_store("train", "train_set", samples.iter().copied(), &encoder)?;
                let t = Instant::now();
                let captioner = pipeline::train_captioner(&lm, &samples, &encoder, &store, vocab.clone(), &cfg, |_, _, _| {})?;
                let ckpt = Checkpoint {
                    params: captioner.params,
                    vocab: captioner.vocab,
                    encoder_config: plan.encoder,
                    events: events.clone(),
                };
                let bytes = ckpt.to_bytes();
                let path = out.join("checkpoints").join(format!("{}_seed{seed}.rcpt", domains.join("+")));
                write_file(&path, &bytes)?;
                let stem = format!("{}_seed{seed}", domains.join("+"));
                write_file(&out.join("checkpoints").join(format!("{stem}.loss.csv")), pipeline::loss_csv(&captioner.train_losses))?;
                log(&format!("seed {seed}: trained on {} in {:.1}s", domains.join("+"), t.elapsed().as_secs_f64()));
                trained.insert(domains.clone(), (path, sha256_hex(&bytes), store));
            }
            let (ckpt_path, ckpt_sha, train_store) = &trained[&domains];
            for &variant in &plan.variants {
                let t = Instant::now();
                let store = match variant {
                    Variant::TrainSet => train_store.clone(),
                    Variant::EvalSet => eval_store.clone(),
                    Variant::Merged => Datastore::merge(train_store, &eval_store)?,
                    Variant::ExternalFile => Datastore::load(external.as_ref().expect("validated"))?,
                };
                let run = format!("{}_{}_seed{seed}", regime.name(), variant.name());
                let store_path = out.join("datastores").join(format!("{run}.rcds"));
                let store_bytes = store.to_bytes();
                write_file(&store_path, &store_bytes)?;

                // Every evaluation reloads the checkpoint from disk and checks its hash.
                if &sha256_file(ckpt_path)? != ckpt_sha {
                    return Err(CliError::Io(format!("checkpoint {} changed on disk", ckpt_path.display())));
                }
                let ckpt = Checkpoint::load(ckpt_path)?;
                let ev = pipeline::evaluate(&ckpt.params, &ckpt.vocab, &encoder, &store, &test, plan.k, cfg.max_new)?;
                let gen_path = out.join("runs").join(&run).join("generations.jsonl");
                write_file(&gen_path, generations_jsonl(&ev.generations))?;
                write_file(&out.join("runs").join(&run).join("report.csv"), ev.report.to_csv())?;
                records.push(record(regime, variant, seed, &domains, plan, ckpt_path, ckpt_sha, &store_path, &store_bytes, &ev.report, gen_path, t.elapsed().as_secs_f64()));
                log(&format!("seed {seed}: {run} bleu1 {:.4} cider_d {:.4}", ev.report.bleu1, ev.report.cider_d));
            }
        }
        for (path, sha, _) in trained.values() {
            if &sha256_file(path)? != sha {
                return Err(CliError::Io(format!("checkpoint {} changed on disk", path.display())));
            }
        }
    }
    let table = render_table(plan, &records, external.as_deref());
    write_file(&out.join("report.csv"), report_csv(&records, plan, external.as_deref()))?;
    write_file(&out.join("summary.csv"), summary_csv(plan, &records, external.as_deref()))?;
    write_file(&out.join("table.txt"), &table)?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).expect("plain struct"));
        lines.push('\n');
    }
    write_file(&out.join("records.jsonl"), lines)?;
    Ok(ExperimentOutcome {
        records,
        table,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

#[allow(clippy::too_many_arguments)]
fn record(
    regime: Regime,
    variant: Variant,
    seed: u64,
    domains: &[String],
    plan: &ExperimentPlan,
    ckpt_path: &Path,
    ckpt_sha: &str,
    store_path: &Path,
    store_bytes: &[u8],
    report: &MetricReport,
    generations: PathBuf,
    seconds: f64,
) -> RunRecord {
    RunRecord {
        regime,
        variant,
        seed,
        train_domains: domains.to_vec(),
        eval_domain: plan.eval_domain.clone(),
        checkpoint: ckpt_path.to_path_buf(),
        checkpoint_sha256: ckpt_sha.to_owned(),
        datastore: store_path.to_path_buf(),
        datastore_sha256: sha256_hex(store_bytes),
        metrics: REPORT_METRICS.iter().map(|m| m.to_string()).zip(report.values()).collect(),
        pair_count: report.pair_count,
        generations,
        wall_clock_seconds: seconds,
    }
}

fn report_csv(records: &[RunRecord], plan: &ExperimentPlan, external: Option<&Path>) -> String {
    let mut out = format!("regime,train,eval,datastore,seed,{},pairs\n", REPORT_METRICS.join(","));
    for r in records {
        let values: Vec<String> = r.values().into_iter().map(fmt4).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.regime.name(),
            r.train_domains.join("+"),
            r.eval_domain,
            datastore_label(r.variant, &r.train_domains, &plan.eval_domain, external),
            r.seed,
            values.join(","),
            r.pair_count
        );
    }
    out
}

/// Mean metrics over seeds, keyed by (regime, variant) in plan order.
pub fn summarize(plan: &ExperimentPlan, records: &[RunRecord]) -> Vec<(Regime, Variant, Vec<f64>)> {
    let mut rows = Vec::new();
    for &regime in &plan.regimes {
        for &variant in &plan.variants {
            let runs: Vec<&RunRecord> = records.iter().filter(|r| r.regime == regime && r.variant == variant).collect();
            if runs.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; REPORT_METRICS.len()];
            for r in &runs {
                for (m, v) in mean.iter_mut().zip(r.values()) {
                    *m += v / runs.len() as f64;
                }
            }
            rows.push((regime, variant, mean));
        }
    }
    rows
}

fn summary_csv(plan: &ExperimentPlan, records: &[RunRecord], external: Option<&Path>) -> String {
    let mut out = format!("regime,train,datastore,seeds,{}\n", REPORT_METRICS.join(","));
    for (regime, variant, mean) in summarize(plan, records) {
        let train = train_domains(plan, regime);
        let values: Vec<String> = mean.into_iter().map(fmt4).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            regime.name(),
            train.join("+"),
            datastore_label(variant, &train, &plan.eval_domain, external),
            plan.seeds.len(),
            values.join(",")
        );
    }
    out
}

fn render_table(plan: &ExperimentPlan, records: &[RunRecord], external: Option<&Path>) -> String {
    let rows: Vec<(String, String, String, Vec<f64>)> = summarize(plan, records)
        .into_iter()
        .map(|(regime, variant, mean)| {
            let train = train_domains(plan, regime);
            (regime.name().to_owned(), train.join("+"), datastore_label(variant, &train, &plan.eval_domain, external), mean)
        })
        .collect();
    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max(5);
    let w2 = rows.iter().map(|r| r.2.len()).max().unwrap_or(0).max(9);
    let mut out = format!("evaluated on {} test split, mean over {} seed(s)\n", plan.eval_domain, plan.seeds.len());
    let _ = write!(out, "{:<w0$}  {:<w1$}  {:<w2$}", "regime", "train", "datastore");
    for m in REPORT_METRICS {
        let _ = write!(out, "  {m:>8}");
    }
    out.push('\n');
    for (regime, train, store, mean) in rows {
        let _ = write!(out, "{regime:<w0$}  {train:<w1$}  {store:<w2$}");
        for v in mean {
            let _ = write!(out, "  {v:>8.4}");
        }
        out.push('\n');
    }
    out
}

pub fn experiment(config: Option<&Path>, seed: Option<u64>, out: &Path, log: impl FnMut(&str)) -> Result<String, CliError> {
    let (mut plan, base) = load_config::<ExperimentPlan>(config)?;
    if let Some(seed) = seed {
        plan.seeds = vec![seed];
    }
    let outcome = run_plan(&plan, &base, out, log)?;
    Ok(format!("{}finished {} runs in {:.1}s", outcome.table, outcome.records.len(), outcome.wall_clock_seconds))
}
