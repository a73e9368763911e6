use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recap_core::decoder::{
    forward, forward_base, generate, loss, loss_and_grad, token_losses, train, Checkpoint,
    CheckpointError, DecoderConfig, DecoderParams, Example, FreezeMask, ParamGroup, Strategy,
    TokenSeq, TrainConfig, Vocabulary,
};
use recap_core::{EncoderConfig, HiddenStateSeq};

fn cfg(layers: usize, d: usize, heads: usize, vocab: usize, enc: usize) -> DecoderConfig {
    DecoderConfig {
        n_layers: layers,
        d_model: d,
        n_heads: heads,
        d_ff: 2 * d,
        max_len: 16,
        vocab_size: vocab,
        enc_dim: enc,
        gate_init: 0.0,
    }
}

fn random_hidden(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> HiddenStateSeq {
    HiddenStateSeq::new(Array2::from_shape_fn((rows, dim), |_| rng.random_range(-1.0..1.0)))
}

fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

#[test]
fn zero_gates_reproduce_the_base_model_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = DecoderParams::init(&cfg(2, 16, 2, 30, 8), 4).unwrap();
    for _ in 0..100 {
        let len = rng.random_range(1..=16);
        let ids = random_ids(&mut rng, len, 30);
        let rows = rng.random_range(1..=4);
        let h = random_hidden(&mut rng, rows, 8);
        let with = forward(&params, &ids, &h).unwrap();
        let without = forward_base(&params, &ids).unwrap();
        assert!(with.iter().zip(without.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn earlier_logits_ignore_later_tokens(seed in 0u64..1000, len in 2usize..16, j in 0usize..16, gate in -1.0f64..1.0) {
        let j = j % len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = DecoderParams::init(&cfg(2, 8, 2, 12, 4), seed).unwrap();
        params.set_gates(gate);
        let ids = random_ids(&mut rng, len, 12);
        let h = random_hidden(&mut rng, 3, 4);
        let mut other = ids.clone();
        for t in other.iter_mut().skip(j) {
            *t = (*t + 1 + rng.random_range(0..11)) % 12;
        }
        let a = forward(&params, &ids, &h).unwrap();
        let b = forward(&params, &other, &h).unwrap();
        for t in 0..j {
            prop_assert_eq!(a.row(t), b.row(t));
        }
    }
}

// Straight-line reference for one block with one head.
fn ln(v: &[f64], g: Option<(&Array1<f64>, &Array1<f64>)>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    v.iter()
        .enumerate()
        .map(|(i, x)| {
            let z = (x - mean) / (var + 1e-5).sqrt();
            match g {
                Some((g, b)) => z * g[i] + b[i],
                None => z,
            }
        })
        .collect()
}

fn matvec(v: &[f64], w: &Array2<f64>) -> Vec<f64> {
    (0..w.ncols())
        .map(|j| (0..w.nrows()).map(|i| v[i] * w[[i, j]]).sum())
        .collect()
}

fn attend(q: &[f64], keys: &[Vec<f64>], vals: &[Vec<f64>]) -> Vec<f64> {
    let scale = (q.len() as f64).sqrt();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / scale)
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; vals[0].len()];
    for (w, v) in e.iter().zip(vals) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w / z * x;
        }
    }
    out
}

#[test]
fn single_layer_matches_hand_rolled_reference() {
    let c = DecoderConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 1,
        d_ff: 16,
        max_len: 4,
        vocab_size: 10,
        enc_dim: 5,
        gate_init: 0.7,
    };
    let p = DecoderParams::init(&c, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let hidden = random_hidden(&mut rng, 3, 5);
    let ids = [4u32, 9];
    let got = forward(&p, &ids, &hidden).unwrap();

    let b = &p.blocks[0];
    let hrows: Vec<Vec<f64>> = hidden.values().outer_iter().map(|r| r.to_vec()).collect();
    let xk: Vec<Vec<f64>> = hrows.iter().map(|r| matvec(r, &b.xattn.wk)).collect();
    let xv: Vec<Vec<f64>> = hrows.iter().map(|r| matvec(r, &b.xattn.wv)).collect();
    let x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..8).map(|j| p.tok_emb[[id as usize, j]] + p.pos_emb[[t, j]]).collect())
        .collect();
    let a: Vec<Vec<f64>> = x.iter().map(|r| ln(r, Some((&b.ln1_g, &b.ln1_b)))).collect();
    let q: Vec<Vec<f64>> = a.iter().map(|r| matvec(r, &b.wq)).collect();
    let k: Vec<Vec<f64>> = a.iter().map(|r| matvec(r, &b.wk)).collect();
    let v: Vec<Vec<f64>> = a.iter().map(|r| matvec(r, &b.wv)).collect();
    for t in 0..2 {
        let sa = matvec(&attend(&q[t], &k[..=t], &v[..=t]), &b.wo);
        let x1: Vec<f64> = x[t].iter().zip(&sa).map(|(u, w)| u + w).collect();
        let cq = matvec(&ln(&x1, None), &b.xattn.wq);
        let ca = matvec(&attend(&cq, &xk, &xv), &b.xattn.wo);
        let gate = b.xattn.gate[0].tanh();
        let x2: Vec<f64> = x1.iter().zip(&ca).map(|(u, w)| u + gate * w).collect();
        let f = ln(&x2, Some((&b.ln2_g, &b.ln2_b)));
        let u: Vec<f64> = matvec(&f, &b.ff_w1).iter().zip(&b.ff_b1).map(|(u, c)| u + c).collect();
        let act: Vec<f64> = u
            .iter()
            .map(|&u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
            .collect();
        let ff = matvec(&act, &b.ff_w2);
        let x3: Vec<f64> = (0..8).map(|j| x2[j] + ff[j] + b.ff_b2[j]).collect();
        let y = ln(&x3, Some((&p.lnf_g, &p.lnf_b)));
        let logits = matvec(&y, &p.w_out);
        for (j, want) in logits.iter().enumerate() {
            assert!((got[[t, j]] - want).abs() < 1e-9, "t={t} j={j}: {} vs {want}", got[[t, j]]);
        }
    }
}

#[test]
fn trainable_fraction_matches_shape_arithmetic() {
    let c = DecoderConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_len: 24,
        vocab_size: 50,
        enc_dim: 16,
        gate_init: 0.0,
    };
    let p = DecoderParams::init(&c, 0).unwrap();
    let (l, d, f, v, t, e) = (2usize, 16usize, 32usize, 50usize, 24usize, 16usize);
    let per_block_base = 2 * d + 4 * d * d + 2 * d + d * f + f + f * d + d;
    let base = v * d + t * d + l * per_block_base + 2 * d + d * v;
    let xattn = l * (d * d + e * d + e * d + d * d + 1);
    let total = base + xattn + e * e;
    let acc = p.account();
    assert_eq!(acc.base, base);
    assert_eq!(acc.cross_attn, xattn);
    assert_eq!(acc.encoder_placeholder, e * e);
    assert_eq!(p.trainable_fraction(), xattn as f64 / total as f64);

    let bigger = DecoderParams::init(&DecoderConfig { vocab_size: 100, ..c }, 0).unwrap();
    assert!(bigger.trainable_fraction() < p.trainable_fraction());
}

#[test]
fn loss_examples() {
    let seq = TokenSeq { ids: vec![0, 3], caption_mask: vec![false, true] };
    let uniform = Array2::zeros((1, 4));
    assert!((loss(&uniform, &seq).unwrap() - 4f64.ln()).abs() < 1e-12);

    let mut sharp = Array2::zeros((1, 4));
    sharp[[0, 3]] = 50.0;
    assert!(loss(&sharp, &seq).unwrap() < 1e-3);

    let seq = TokenSeq { ids: vec![0, 1, 2, 3, 1], caption_mask: vec![false, false, true, true, true] };
    let logits = Array2::from_shape_fn((4, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
    let per = token_losses(&logits, &seq).unwrap();
    assert_eq!(per.len(), 3);
    let oracle: Vec<f64> = [(1usize, 2usize), (2, 3), (3, 1)]
        .iter()
        .map(|&(row, target)| {
            let z: f64 = (0..4).map(|j| logits[[row, j]].exp()).sum();
            z.ln() - logits[[row, target]]
        })
        .collect();
    for (a, b) in per.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    let mean = oracle.iter().sum::<f64>() / 3.0;
    assert!((loss(&logits, &seq).unwrap() - mean).abs() < 1e-12);

    let none = TokenSeq { ids: vec![0, 1], caption_mask: vec![false, false] };
    assert!(loss(&Array2::zeros((1, 4)), &none).is_err());
}

fn toy_examples(rng: &mut ChaCha8Rng, n: usize, vocab: usize, enc: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let plen = rng.random_range(0..4);
            let clen = rng.random_range(1..5);
            let prompt = (0..plen).map(|_| rng.random_range(4..vocab as u32)).collect::<Vec<_>>();
            let caption = (0..clen).map(|_| rng.random_range(4..vocab as u32)).collect::<Vec<_>>();
            let rows = rng.random_range(1..4);
            Example {
                seq: TokenSeq::with_prompt(&prompt, &caption),
                hidden: Some(random_hidden(rng, rows, enc)),
            }
        })
        .collect()
}

#[test]
fn gate_gradient_is_nonzero_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = DecoderParams::init(&cfg(2, 8, 2, 12, 4), 2).unwrap();
    let ex = &toy_examples(&mut rng, 1, 12, 4)[0];
    let (_, g) = loss_and_grad(&p, &ex.seq, ex.hidden.as_ref(), FreezeMask::ADAPTERS).unwrap();
    for (bi, block) in g.blocks.iter().enumerate() {
        let eps = 1e-6;
        let mut plus = p.clone();
        plus.blocks[bi].xattn.gate[0] = eps;
        let mut minus = p.clone();
        minus.blocks[bi].xattn.gate[0] = -eps;
        let f = |q: &DecoderParams| loss_and_grad(q, &ex.seq, ex.hidden.as_ref(), FreezeMask::ADAPTERS).unwrap().0;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
        assert!(block.xattn.gate[0].abs() > 1e-8);
        assert!((block.xattn.gate[0] - numeric).abs() < 1e-6 * (1.0 + numeric.abs()));
    }
    for t in g.tensors() {
        if t.group == ParamGroup::Base {
            assert!(t.data.iter().all(|&v| v == 0.0), "{}", t.name);
        }
    }
}

#[test]
fn epoch_loss_is_the_mean_of_example_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = DecoderParams::init(&cfg(2, 8, 2, 12, 4), 3).unwrap();
    p.set_gates(0.4);
    let examples = toy_examples(&mut rng, 7, 12, 4);
    let per: Vec<f64> = examples
        .iter()
        .map(|e| loss_and_grad(&p, &e.seq, e.hidden.as_ref(), FreezeMask::ADAPTERS).unwrap().0)
        .collect();
    let frozen = TrainConfig { lr: 0.0, epochs: 1, batch_size: 3, seed: 9, ..TrainConfig::default() };
    let out = train(p.clone(), &examples, FreezeMask::ADAPTERS, &frozen, |_, _, _| {}).unwrap();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    assert!((out.epoch_losses[0] - mean).abs() < 1e-9);

    // Batch gradient equals the mean of individual gradients.
    let mut batch = p.zeros_like();
    for e in examples.iter().rev() {
        recap_core::decoder::accumulate_grad(&p, &e.seq, e.hidden.as_ref(), FreezeMask::ADAPTERS, 1.0 / 7.0, &mut batch).unwrap();
    }
    let singles: Vec<DecoderParams> = examples
        .iter()
        .map(|e| loss_and_grad(&p, &e.seq, e.hidden.as_ref(), FreezeMask::ADAPTERS).unwrap().1)
        .collect();
    for (ti, t) in batch.tensors().iter().enumerate() {
        for i in 0..t.data.len() {
            let m: f64 = singles.iter().map(|s| s.tensors()[ti].data[i]).sum::<f64>() / 7.0;
            assert!((t.data[i] - m).abs() < 1e-9);
        }
    }
}

#[test]
fn adapter_training_leaves_base_untouched_and_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = DecoderParams::init(&cfg(2, 8, 2, 12, 4), 4).unwrap();
    let examples = toy_examples(&mut rng, 6, 12, 4);
    let tc = TrainConfig { lr: 1e-2, epochs: 30, batch_size: 4, seed: 1, ..TrainConfig::default() };
    let a = train(p.clone(), &examples, FreezeMask::ADAPTERS, &tc, |_, _, _| {}).unwrap();
    let b = train(p.clone(), &examples, FreezeMask::ADAPTERS, &tc, |_, _, _| {}).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.epoch_losses, b.epoch_losses);
    for (before, after) in p.tensors().iter().zip(a.params.tensors()) {
        let same = before.data.iter().zip(after.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        match before.group {
            ParamGroup::Base => assert!(same, "{} moved", before.name),
            ParamGroup::CrossAttn => assert!(!same, "{} did not move", before.name),
        }
    }
    assert!(a.epoch_losses.last().unwrap() < &a.epoch_losses[0]);
}

#[test]
fn generation_budget_and_determinism() {
    let vocab = Vocabulary::build(&["a dog barks", "rain falls hard"], 1).unwrap();
    let c = DecoderConfig { vocab_size: vocab.len(), ..cfg(1, 8, 2, 0, 4) };
    let mut p = DecoderParams::init(&c, 5).unwrap();
    p.set_gates(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = random_hidden(&mut rng, 2, 4);
    assert_eq!(generate(&p, &vocab, "a dog", &h, 0, Strategy::Greedy).unwrap(), "");
    let one = generate(&p, &vocab, "a dog", &h, 6, Strategy::Greedy).unwrap();
    let two = generate(&p, &vocab, "a dog", &h, 6, Strategy::Greedy).unwrap();
    assert_eq!(one, two);
    assert!(one.split_whitespace().count() <= 6);
    let beam = generate(&p, &vocab, "a dog", &h, 6, Strategy::Beam { width: 3 }).unwrap();
    assert!(beam.split_whitespace().count() <= 6);
    // Every generated token is predicted from at most max_len inputs.
    let long = generate(&p, &vocab, "a dog barks rain falls hard a dog barks rain", &h, 50, Strategy::Greedy).unwrap();
    assert!(long.split_whitespace().count() <= 16 + 1 - 11);
}

#[test]
fn checkpoint_round_trip_and_guards() {
    let vocab = Vocabulary::build(&["a dog barks", "rain falls"], 1).unwrap();
    let c = DecoderConfig { vocab_size: vocab.len(), ..cfg(2, 8, 2, 0, 4) };
    let mut p = DecoderParams::init(&c, 6).unwrap();
    p.set_gates(0.25);
    let ck = Checkpoint {
        params: p,
        vocab,
        encoder_config: EncoderConfig { dim: 4, seed: 11, alpha: 0.2 },
        events: vec!["dog_bark".into(), "rain".into()],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.rcpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), ck.to_bytes());

    let mut bytes = ck.to_bytes();
    bytes[1] = b'!';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    let bytes = ck.to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(CheckpointError::Truncated)));
    let mut bytes = ck.to_bytes();
    bytes[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::UnsupportedVersion(9))));
}
