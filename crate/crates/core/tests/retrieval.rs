use std::collections::HashSet;

use proptest::prelude::*;
use recap_core::corpus::{Dataset, DomainSpec, GenConfig};
use recap_core::datastore::{CaptionEntry, Datastore, DatastoreError};
use recap_core::prompting::{retrieve_and_prompt, RetrievalConfig};
use recap_core::toyclap::{AudioSample, EncoderConfig, EventToken, ToyClap};
use recap_core::Embedding;

const DIM: usize = 4;

fn config() -> EncoderConfig {
    EncoderConfig {
        dim: DIM,
        seed: 3,
        alpha: 0.1,
    }
}

fn unit(v: &[f64]) -> Embedding {
    Embedding::normalized(v).unwrap_or_else(|| Embedding::normalized(&[1.0, 0.0, 0.0, 0.0]).unwrap())
}

/// Entries drawn from a small pool of directions so equal scores are common.
fn store_strategy() -> impl Strategy<Value = Vec<(String, Vec<f64>)>> {
    let pool = prop::collection::vec(prop::collection::vec(-3i32..=3, DIM), 1..4);
    (pool, 1usize..25).prop_flat_map(|(pool, n)| {
        let picks = prop::collection::vec(0..pool.len(), n);
        let ids = prop::collection::hash_set("[a-z]{1,3}", n);
        (Just(pool), picks, ids).prop_map(|(pool, picks, ids)| {
            ids.into_iter()
                .zip(picks)
                .map(|(id, p)| (id, pool[p].iter().map(|&x| x as f64).collect()))
                .collect()
        })
    })
}

fn build(raw: &[(String, Vec<f64>)]) -> Datastore {
    let entries = raw
        .iter()
        .map(|(id, v)| CaptionEntry {
            entry_id: id.clone(),
            text: format!("caption {id}"),
            embedding: unit(v),
            source: "test".into(),
        })
        .collect();
    Datastore::from_entries("s", config(), entries).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn topk_matches_full_sort(
        raw in store_strategy(),
        q in prop::collection::vec(-3i32..=3, DIM),
        k in 1usize..30,
        mask in prop::collection::vec(any::<bool>(), 25),
    ) {
        let store = build(&raw);
        let query = unit(&q.iter().map(|&x| x as f64).collect::<Vec<_>>());
        let exclude: HashSet<String> = raw
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|((id, _), _)| id.clone())
            .collect();
        let hits = store.query_topk(&query, k, &exclude).unwrap();

        let mut all: Vec<(f64, String)> = store
            .entries()
            .iter()
            .filter(|e| !exclude.contains(&e.entry_id))
            .map(|e| (query.cosine(&e.embedding), e.entry_id.clone()))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        all.truncate(k);

        prop_assert_eq!(hits.len(), all.len());
        for (h, (score, id)) in hits.iter().zip(&all) {
            prop_assert_eq!(&h.entry_id, id);
            prop_assert_eq!(h.score, *score);
            prop_assert!(!exclude.contains(&h.entry_id));
            prop_assert!((-1.0..=1.0).contains(&h.score));
        }
    }

    #[test]
    fn prompts_never_leak_excluded_captions(seed in 0u64..50, k in 1usize..6) {
        let cfg = GenConfig { seed, samples_per_domain: 20, min_novelty: 0.0, require_compositional: false, ..GenConfig::default() };
        let ds = Dataset::generate(&[DomainSpec::city()], &cfg).unwrap();
        let enc = ToyClap::new(EncoderConfig::default(), ds.event_names()).unwrap();
        let pairs: Vec<(String, String)> = ds.samples().iter().flat_map(|s| s.captions.iter().map(|c| (c.clone(), "trainset".to_string()))).collect();
        let store = Datastore::build("train", &pairs, &enc).unwrap();
        for (i, s) in ds.samples().iter().enumerate() {
            let exclude: HashSet<String> = store.entries()[i * 5..i * 5 + 5].iter().map(|e| e.entry_id.clone()).collect();
            let p = retrieve_and_prompt(&s.audio, &enc, &store, &RetrievalConfig { k }, &exclude).unwrap();
            prop_assert!(p.retrieved_ids.iter().all(|id| !exclude.contains(id)));
            prop_assert_eq!(p.k_used, p.retrieved_ids.len());
            prop_assert!(p.k_used <= k);
        }
    }
}

#[test]
fn random_store_against_sort_oracle() {
    let enc = ToyClap::new(EncoderConfig::default(), Vec::<String>::new()).unwrap();
    let captions: Vec<(String, &str)> = (0..100).map(|i| (format!("word{} word{} w{}", i % 17, i % 5, i), "x")).collect();
    let store = Datastore::build("r", &captions, &enc).unwrap();
    for q in 0..20 {
        let query = enc.embed_text(&format!("word{} w{}", q % 17, q * 3)).unwrap();
        let hits = store.query_topk(&query, 5, &HashSet::new()).unwrap();
        let mut all: Vec<_> = store.entries().iter().map(|e| (query.cosine(&e.embedding), e.entry_id.clone())).collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let want: Vec<_> = all.iter().take(5).map(|(_, id)| id.clone()).collect();
        let got: Vec<_> = hits.iter().map(|h| h.entry_id.clone()).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let enc = ToyClap::new(EncoderConfig { dim: 32, seed: 9, alpha: 0.25 }, ["dog_bark"]).unwrap();
    let captions: Vec<(String, String)> = (0..100)
        .map(|i| (format!("caption ü{i} with dog_bark"), if i % 2 == 0 { "trainset".into() } else { "external".into() }))
        .collect();
    let store = Datastore::build("hundred", &captions, &enc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hundred.rcds");
    store.save(&path).unwrap();
    let back = Datastore::load(&path).unwrap();
    assert_eq!(back, store);
    for (a, b) in back.entries().iter().zip(store.entries()) {
        let bits = |e: &CaptionEntry| e.embedding.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }

    let wrong = Embedding::normalized(&vec![1.0; 64]).unwrap();
    assert!(matches!(back.query_topk(&wrong, 1, &HashSet::new()), Err(DatastoreError::DimMismatch { .. })));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(matches!(Datastore::from_bytes("x", &bytes), Err(DatastoreError::BadMagic)));
    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(Datastore::from_bytes("x", &bytes[..bytes.len() - 3]), Err(DatastoreError::Truncated)));
}

#[test]
fn merged_store_finds_planted_neighbour() {
    let enc = ToyClap::new(EncoderConfig::default(), ["siren", "rain", "owl_hoot"]).unwrap();
    let a = Datastore::build("a", &[("a siren wails", "trainset"), ("rain on a roof", "trainset"), ("a siren and rain", "trainset")], &enc).unwrap();
    let b = Datastore::build("b", &[("an owl_hoot at night", "external"), ("quiet owl_hoot", "external")], &enc).unwrap();
    let merged = Datastore::merge(&a, &b).unwrap();
    assert_eq!(merged.len(), 5);
    let audio = AudioSample::new("q", vec![EventToken::new("owl_hoot").unwrap()], "forest");
    let hits = merged.query_topk(&enc.embed_audio(&audio).unwrap(), 1, &HashSet::new()).unwrap();
    assert!(hits[0].entry_id.starts_with("b:"), "{:?}", hits);
}

#[test]
fn paired_captions_rank_in_top_five() {
    let cfg = GenConfig { seed: 4, samples_per_domain: 120, ..GenConfig::default() };
    let ds = Dataset::generate(&[DomainSpec::city(), DomainSpec::forest()], &cfg).unwrap();
    let enc = ToyClap::new(EncoderConfig::default(), ds.event_names()).unwrap();
    let pairs: Vec<(&str, &str)> = ds.samples().iter().map(|s| (s.captions[0].as_str(), "x")).collect();
    assert!(pairs.len() >= 200);
    let store = Datastore::build("paired", &pairs, &enc).unwrap();
    let mut found = 0;
    for (i, s) in ds.samples().iter().enumerate() {
        let q = enc.embed_audio(&s.audio).unwrap();
        let hits = store.query_topk(&q, 5, &HashSet::new()).unwrap();
        let own = &store.entries()[i].entry_id;
        // Identical captions of other samples with the same events count too.
        if hits.iter().any(|h| &h.entry_id == own || h.text == s.captions[0]) {
            found += 1;
        }
    }
    let rate = found as f64 / ds.len() as f64;
    assert!(rate >= 0.9, "{rate}");
}

#[test]
fn paired_caption_beats_unpaired() {
    let cfg = GenConfig { seed: 8, samples_per_domain: 25, ..GenConfig::default() };
    let ds = Dataset::generate(&[DomainSpec::city(), DomainSpec::forest()], &cfg).unwrap();
    let enc = ToyClap::new(EncoderConfig::default(), ds.event_names()).unwrap();
    let n = ds.len();
    assert_eq!(n, 50);
    for i in 0..n {
        let s = &ds.samples()[i];
        // Pair with a sample from the other domain.
        let other = &ds.samples()[(i + n / 2) % n];
        let a = enc.embed_audio(&s.audio).unwrap();
        let dot = |e: &Embedding| a.values().iter().zip(e.values()).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
        let paired = dot(&enc.embed_text(&s.captions[0]).unwrap());
        let unpaired = dot(&enc.embed_text(&other.captions[0]).unwrap());
        assert!(paired > unpaired, "{} vs {}", s.captions[0], other.captions[0]);
    }
}
