use crank::embeddings::{
    base_vector, EmbeddingProvider, EmbeddingProviderConfig, EncodeKind, EncodingCounter, Vocabulary, CONTEXT_WEIGHT,
    SELF_WEIGHT,
};
use crank::TokenId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn mix(z: u64) -> u64 {
    let z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[test]
fn base_vectors_follow_the_seed_derivation() {
    for (token, seed) in [(0u32, 0u64), (7, 42), (123_456, u64::MAX)] {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(token as u64)));
        let raw: Vec<f64> = (0..24).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let got = base_vector(TokenId(token), 24, seed);
        for (a, b) in got.iter().zip(&raw) {
            assert!((a - b / n).abs() < 1e-15);
        }
    }
}

#[test]
fn rows_mix_self_and_window_context() {
    let mut vocab = Vocabulary::new();
    let tokens = vocab.tokenize("alpha beta gamma delta epsilon");
    let (dim, seed, window) = (12, 9, 2);
    let provider = EmbeddingProvider::new(EmbeddingProviderConfig::hashed(dim, seed, window)).unwrap();
    let m = provider
        .encode_raw(0, &tokens, EncodeKind::Passage, &EncodingCounter::new())
        .unwrap();
    let bases: Vec<Vec<f64>> = tokens.iter().map(|t| base_vector(t.id, dim, seed)).collect();
    for t in 0..tokens.len() {
        let neighbours: Vec<usize> = (0..tokens.len())
            .filter(|&s| s != t && (s as i64 - t as i64).unsigned_abs() as usize <= window)
            .collect();
        for (d, &own) in bases[t].iter().enumerate() {
            let ctx = neighbours.iter().map(|&s| bases[s][d]).sum::<f64>() / neighbours.len() as f64;
            let expected = SELF_WEIGHT * own + CONTEXT_WEIGHT * ctx;
            assert_eq!(m.row(t)[d], expected as f32, "token {t} dim {d}");
        }
    }
}

#[test]
fn lone_token_is_its_base_vector() {
    let mut vocab = Vocabulary::new();
    let tokens = vocab.tokenize("solitary");
    let provider = EmbeddingProvider::new(EmbeddingProviderConfig::hashed(16, 3, 2)).unwrap();
    let m = provider
        .encode_raw(0, &tokens, EncodeKind::Vocabulary, &EncodingCounter::new())
        .unwrap();
    let base = base_vector(tokens[0].id, 16, 3);
    for (a, b) in m.row(0).iter().zip(&base) {
        assert_eq!(*a, *b as f32);
    }
}

#[test]
fn context_changes_rows_but_not_determinism() {
    let mut vocab = Vocabulary::new();
    let a = vocab.tokenize("salary average annual");
    let b = vocab.tokenize("salary cell phone");
    let provider = EmbeddingProvider::new(EmbeddingProviderConfig::hashed(16, 1, 2)).unwrap();
    let c = EncodingCounter::new();
    let ma = provider.encode_raw(0, &a, EncodeKind::Query, &c).unwrap();
    let mb = provider.encode_raw(1, &b, EncodeKind::Passage, &c).unwrap();
    assert_ne!(ma.row(0), mb.row(0));
    assert_eq!(ma, provider.encode_raw(0, &a, EncodeKind::Query, &c).unwrap());
    let snap = c.snapshot();
    assert_eq!((snap.query_encodings, snap.passage_encodings), (2, 1));
}
