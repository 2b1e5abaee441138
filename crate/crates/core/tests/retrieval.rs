mod common;

use std::sync::OnceLock;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toksum::corpus::CodeSample;
use toksum::datastore::{build_datastore, load_datastore, save_datastore, Datastore, KeyMode, RetrievalTriple};
use toksum::fusion::{fuse_three, fuse_two, retrieval_distribution, FusionConfig, FusionMode, SentenceIndex, Tram};
use toksum::model::{beam_search, greedy_decode, train_model, EncodedSample, Model, TrainConfig};
use toksum::tensor::l2_normalize;

struct Fixture {
    train: Vec<CodeSample>,
    test: Vec<CodeSample>,
    model: Model,
    encoded: Vec<EncodedSample>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let [train, val, test] = corpus(21, 30);
        let mut model = model_for(&train, small_config(), 4);
        let encoded = encode_all(&model, &train);
        let va = encode_all(&model, &val);
        let cfg = TrainConfig {
            batch_size: 10,
            learning_rate: 3e-3,
            max_epochs: 4,
            patience: 10,
            seed: 1,
        };
        train_model(&mut model, &encoded, &va, &cfg).unwrap();
        Fixture {
            train,
            test,
            model,
            encoded,
        }
    })
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    l2_normalize(&v).unwrap()
}

/// Full scan: score everything, stable sort by descending score.
fn brute_force(ds: &Datastore, q: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..ds.len())
        .map(|i| (i, ds.key(i).iter().zip(q).map(|(&a, &b)| a as f64 * b).sum()))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    all.truncate(k);
    all
}

#[test]
fn topk_matches_full_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dim = 24;
    let mut ds = Datastore::new(dim);
    for i in 0..1000 {
        ds.push(&random_unit(&mut rng, dim), 4 + i % 50, None).unwrap();
    }
    // Duplicate keys force exact ties.
    let dup = ds.key(17).iter().map(|&v| v as f64).collect::<Vec<_>>();
    ds.push(&dup, 9, None).unwrap();
    for _ in 0..100 {
        let q = random_unit(&mut rng, dim);
        let got: Vec<(usize, f64)> = ds.query_topk(&q, 16).unwrap().iter().map(|t| (t.index, t.similarity)).collect();
        assert_eq!(got, brute_force(&ds, &q, 16));
    }
    let got = ds.query_topk(&dup, 2).unwrap();
    assert_eq!((got[0].index, got[1].index), (17, 1000));
}

#[test]
fn noise_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ds = Datastore::new(4);
    for i in 0..200 {
        ds.push(&random_unit(&mut rng, 4), 4 + i, None).unwrap();
    }
    assert_eq!(ds.inject_noise(0.0, 5).unwrap(), ds);
    let full = ds.inject_noise(1.0, 5).unwrap();
    let fixed = (0..ds.len()).filter(|&i| full.value(i) == ds.value(i)).count();
    assert_eq!(fixed, 0);
    for f in [0.05, 0.10, 0.20] {
        let noisy = ds.inject_noise(f, 3).unwrap();
        assert_eq!(noisy, ds.inject_noise(f, 3).unwrap());
        let moved = (0..ds.len()).filter(|&i| noisy.value(i) != ds.value(i)).count();
        assert_eq!(moved, (f * 200.0).floor() as usize);
        let mut a = noisy.values().to_vec();
        let mut b = ds.values().to_vec();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        for i in 0..ds.len() {
            assert_eq!(noisy.key(i), ds.key(i));
        }
    }
    assert!(ds.inject_noise(1.5, 0).is_err());
}

#[test]
fn build_counts_and_determinism() {
    let f = fixture();
    let ds = build_datastore(&f.model, &f.encoded, KeyMode::Full).unwrap();
    let expected: usize = f.encoded.iter().map(|s| s.summary_ids.len() + 1).sum();
    assert_eq!(ds.len(), expected);
    assert_eq!(ds.dim(), 3 * 16);
    for i in 0..ds.len() {
        let n: f64 = ds.key(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    let again = build_datastore(&f.model, &f.encoded, KeyMode::Full).unwrap();
    assert_eq!(ds.to_bytes(), again.to_bytes());

    let one = build_datastore(&f.model, &f.encoded[..1], KeyMode::Full).unwrap();
    assert_eq!(one.len(), f.encoded[0].summary_ids.len() + 1);
    assert_eq!(one.value(one.len() - 1), toksum::corpus::EOS);

    let hr = build_datastore(&f.model, &f.encoded[..3], KeyMode::DecoderOnly).unwrap();
    assert_eq!(hr.dim(), 16);

    let untrained = model_for(&f.train, small_config(), 4);
    assert!(build_datastore(&untrained, &f.encoded, KeyMode::Full).is_err());
}

#[test]
fn self_retrieval_returns_own_entry() {
    let f = fixture();
    let ds = build_datastore(&f.model, &f.encoded, KeyMode::Full).unwrap();
    for i in (0..ds.len()).step_by(7) {
        let src = ds.source(i).unwrap();
        let s = &f.encoded[src.sample];
        let enc = f.model.encode(s).unwrap();
        let steps = f.model.decode_all(&s.decoder_input(), &enc).unwrap();
        let key = toksum::datastore::step_key(KeyMode::Full, &steps[src.step], &enc).unwrap();
        let top = ds.query_topk(&key, 1).unwrap();
        assert!((top[0].similarity - 1.0).abs() < 1e-6);
        assert_eq!(top[0].value, ds.value(i));
    }
}

#[test]
fn file_round_trip_and_size() {
    let f = fixture();
    let ds = build_datastore(&f.model, &f.encoded[..5], KeyMode::Full).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.bin");
    save_datastore(&ds, &path).unwrap();
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(size, 20 + ds.len() * (4 * 3 * 16 + 4) + 8);
    assert_eq!(load_datastore(&path).unwrap(), ds);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[3] = b'?';
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_datastore(&path).is_err());
}

#[test]
fn lambda_zero_matches_base_decoding() {
    let f = fixture();
    let ds = build_datastore(&f.model, &f.encoded, KeyMode::Full).unwrap();
    for beam in [1, 4] {
        let cfg = FusionConfig {
            lambda: 0.0,
            beam,
            ..FusionConfig::default()
        };
        let tram = Tram::new(&f.model, &ds, cfg, None).unwrap();
        for s in f.test.iter().take(6) {
            let enc = f.model.encode_sample(s);
            let base = if beam == 1 {
                greedy_decode(&f.model, &enc, 30).unwrap()
            } else {
                beam_search(&f.model, &enc, beam, 30).unwrap()
            };
            assert_eq!(tram.generate(&enc).unwrap().tokens, base);
        }
    }
}

#[test]
fn tram_rejects_mismatched_datastore() {
    let f = fixture();
    let ds = Datastore::new(7);
    assert!(Tram::new(&f.model, &ds, FusionConfig::default(), None).is_err());
    let hr = build_datastore(&f.model, &f.encoded[..2], KeyMode::DecoderOnly).unwrap();
    assert!(Tram::new(&f.model, &hr, FusionConfig::default(), None).is_err());
    let cfg = FusionConfig {
        no_hr: true,
        ..FusionConfig::default()
    };
    assert!(Tram::new(&f.model, &hr, cfg, None).is_ok());
}

#[test]
fn trace_steps_are_consistent() {
    let f = fixture();
    let ds = build_datastore(&f.model, &f.encoded, KeyMode::Full).unwrap();
    let cfg = FusionConfig {
        beam: 1,
        ..FusionConfig::default()
    };
    let tram = Tram::new(&f.model, &ds, cfg, None).unwrap();
    let g = tram.generate(&f.model.encode_sample(&f.test[0])).unwrap();
    assert!(g.trace.len() == g.tokens.len() || g.trace.len() == g.tokens.len() + 1);
    for (i, step) in g.trace.iter().enumerate() {
        assert_eq!(step.step, i + 1);
        let total: f64 = step.retrieved.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(step.retrieved.len() <= 16);
        assert!(step.model_mass >= 0.0 && step.retrieval_mass >= 0.0);
        let json = serde_json::to_value(step).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 5, "{keys:?}");
        for k in ["step", "chosen", "retrieved", "model_mass", "retrieval_mass"] {
            assert!(json.get(k).is_some());
        }
    }
    assert!(g.trace[0].display_retrieved().starts_with('"'));
}

#[test]
fn code_embedding_contracts() {
    let f = fixture();
    let a = f.model.code_embedding(&f.encoded[0]).unwrap();
    assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(a, f.model.code_embedding(&f.encoded[0].clone()).unwrap());
    let single = EncodedSample {
        code_ids: vec![f.encoded[0].code_ids[0]],
        ..f.encoded[0].clone()
    };
    let h = f.model.sc_encode(&single.code_ids).unwrap();
    let want = l2_normalize(h.row(0)).unwrap();
    let got = f.model.code_embedding(&single).unwrap();
    assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn sentence_retrieval_contracts() {
    let f = fixture();
    let index = SentenceIndex::build(&f.model, &f.encoded).unwrap();
    // An exact duplicate under a new id is found with similarity 1.
    let mut dup = f.encoded[3].clone();
    dup.id = "query".into();
    let e = f.model.code_embedding(&dup).unwrap();
    let r = index.retrieve(&dup.id, &e).unwrap();
    assert_eq!(index.embedding(r.index), e.as_slice());
    assert!((r.sim - 1.0).abs() < 1e-12);
    // Querying an indexed sample never returns itself; result equals a full scan.
    for (qi, s) in f.encoded.iter().enumerate().take(10) {
        let e = index.embedding(qi).to_vec();
        let r = index.retrieve(&s.id, &e).unwrap();
        assert_ne!(r.index, qi);
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for j in 0..index.len() {
            if j == qi {
                continue;
            }
            let sim: f64 = index.embedding(j).iter().zip(&e).map(|(a, b)| a * b).sum();
            if sim > best.1 {
                best = (j, sim);
            }
        }
        assert_eq!(r.index, best.0);
        assert_eq!(r.raw_sim, best.1);
    }
    // Orthogonal corpus: similarity zero.
    let orth = SentenceIndex::from_parts(
        vec![f.encoded[0].clone(), f.encoded[1].clone()],
        vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
    )
    .unwrap();
    assert_eq!(orth.retrieve("q", &[0.0, 0.0, 1.0]).unwrap().sim, 0.0);
    let negative = SentenceIndex::from_parts(vec![f.encoded[0].clone()], vec![vec![-1.0, 0.0]]).unwrap();
    assert_eq!(negative.retrieve("q", &[1.0, 0.0]).unwrap().sim, 0.0);
    let only_self = SentenceIndex::from_parts(vec![f.encoded[0].clone()], vec![vec![1.0]]).unwrap();
    assert!(only_self.retrieve(&f.encoded[0].id, &[1.0]).is_err());
}

#[test]
fn three_way_generation_runs() {
    let f = fixture();
    let ds = build_datastore(&f.model, &f.encoded, KeyMode::Full).unwrap();
    let index = SentenceIndex::build(&f.model, &f.encoded).unwrap();
    let cfg = FusionConfig {
        mode: FusionMode::TokenSentence,
        beam: 2,
        ..FusionConfig::default()
    };
    assert!(Tram::new(&f.model, &ds, cfg.clone(), None).is_err());
    let tram = Tram::new(&f.model, &ds, cfg, Some(&index)).unwrap();
    let g = tram.generate(&f.encoded[0]).unwrap();
    let found = g.sentence.unwrap();
    assert_ne!(index.sample(found.index).id, f.encoded[0].id);
    assert!(g.tokens.len() <= 30);
}

fn distribution(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn dist_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(distribution)
}

fn triples_strategy() -> impl Strategy<Value = Vec<RetrievalTriple>> {
    prop::collection::vec((4usize..10, -1.0f64..1.0), 1..16).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(index, (value, similarity))| RetrievalTriple {
                index,
                value,
                similarity,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn fused_outputs_are_distributions(
        pm in dist_strategy(8), pr in dist_strategy(8), ps in dist_strategy(8),
        lambda in 0.0f64..=1.0, l1 in 0.0f64..0.5, l2 in 0.0f64..0.5, sim in -1.0f64..1.0,
    ) {
        for p in [fuse_two(&pm, &pr, lambda).unwrap(), fuse_three(&pm, &pr, &ps, sim, l1, l2).unwrap()] {
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn three_way_with_zero_sim_reduces_to_two_way(
        pm in dist_strategy(6), pr in dist_strategy(6), ps in dist_strategy(6),
        l1 in 0.0f64..0.6, l2 in 0.0f64..0.39,
    ) {
        let three = fuse_three(&pm, &pr, &ps, 0.0, l1, l2).unwrap();
        let two = fuse_two(&pm, &pr, l1 / (1.0 - l2)).unwrap();
        for (a, b) in three.iter().zip(&two) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn retrieval_distribution_depends_on_multiset(triples in triples_strategy(), t in 0.1f64..50.0) {
        let p = retrieval_distribution(&triples, t, 10).unwrap();
        let mut rev = triples.clone();
        rev.reverse();
        let q = retrieval_distribution(&rev, t, 10).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for v in 0..10 {
            if !triples.iter().any(|x| x.value == v) {
                prop_assert_eq!(p[v], 0.0);
            }
        }
    }

    #[test]
    fn temperature_limits(triples in triples_strategy()) {
        // T → 0: proportional to counts.
        let cold = retrieval_distribution(&triples, 1e-9, 10).unwrap();
        for v in 0..10 {
            let count = triples.iter().filter(|x| x.value == v).count() as f64;
            prop_assert!((cold[v] - count / triples.len() as f64).abs() < 1e-6);
        }
        // T → ∞: all mass on the max-similarity value(s).
        let hot = retrieval_distribution(&triples, 1e6, 10).unwrap();
        let max = triples.iter().map(|x| x.similarity).fold(f64::NEG_INFINITY, f64::max);
        let top: f64 = (0..10)
            .filter(|&v| triples.iter().any(|x| x.value == v && x.similarity == max))
            .map(|v| hot[v])
            .sum();
        prop_assert!(top > 1.0 - 1e-6 || triples.iter().filter(|x| max - x.similarity < 1e-7).count() > 1);
    }

    #[test]
    fn fuse_two_endpoint_argmax(pm in dist_strategy(7), pr in dist_strategy(7)) {
        let argmax = |p: &[f64]| (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        prop_assert_eq!(argmax(&fuse_two(&pm, &pr, 0.0).unwrap()), argmax(&pm));
        prop_assert_eq!(argmax(&fuse_two(&pm, &pr, 1.0).unwrap()), argmax(&pr));
    }
}
