//! Browser bindings for three small interactive demos: MaxSim versus
//! teacher reranking over user-supplied passages, 2-D k-means, and
//! precision-recall curves. Every export takes plain strings/numbers and
//! returns a JSON string.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wasm_bindgen::prelude::*;

use crank::collective::{extract_centroids, pool_feedback_rows, select_by_idf, teacher_rerank, PrfConfig};
use crank::collective::{kmeans, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crank::embeddings::tsv::TextRecord;
use crank::embeddings::{EmbeddingProvider, EmbeddingProviderConfig, EncodeKind, EncodingCounter, Vocabulary};
use crank::evalkit::pr_curve_from_pairs;
use crank::index::{build_idf, build_index, retrieve, Corpus, Ranking};
use crank::linalg::Matrix;
use crank::relevance::{EncodedQuery, Projection};
use crank::QueryId;

const DIM_IN: usize = 32;
const DIM_OUT: usize = 16;
const SEED: u64 = 7;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Core(#[from] crank::Error),
    #[error("bad JSON input: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, DemoError>;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ScoredPassage {
    pub id: u64,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Expansion {
    pub token: String,
    pub weight: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RankDemo {
    pub maxsim: Vec<ScoredPassage>,
    pub teacher: Vec<ScoredPassage>,
    pub expansions: Vec<Expansion>,
    pub feedback_passages: usize,
    pub clusters: usize,
}

fn scored(r: &Ranking, texts: &[String]) -> Vec<ScoredPassage> {
    r.items
        .iter()
        .map(|(p, s)| ScoredPassage {
            id: p.0,
            score: *s,
            text: texts[p.0 as usize].clone(),
        })
        .collect()
}

/// Ranks newline-separated `passages` for `query` with plain MaxSim and
/// with the feedback-augmented teacher at weight `beta`, keeping `f_e`
/// expansion terms. Cluster and feedback counts shrink to fit small inputs.
pub fn rank_demo_json(query: &str, passages: &str, beta: f64, f_p: usize, f_e: usize) -> Result<String> {
    let texts: Vec<String> = passages
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if texts.is_empty() {
        return Err(DemoError::Input("enter at least one passage".into()));
    }
    let records: Vec<TextRecord> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| TextRecord {
            id: i as u64,
            text: t.clone(),
        })
        .collect();
    let mut vocab = Vocabulary::new();
    let corpus = Corpus::from_records(&records, &mut vocab)?;
    let provider = EmbeddingProvider::new(EmbeddingProviderConfig::hashed(DIM_IN, SEED, 2))?;
    let theta = Projection::random(DIM_OUT, DIM_IN, SEED);
    let counter = EncodingCounter::new();
    let index = build_index(&corpus, &provider, &theta, &counter)?;
    let idf = build_idf(&corpus)?;

    let tokens = vocab.tokenize(query);
    if tokens.is_empty() {
        return Err(DemoError::Input("enter a query".into()));
    }
    let raw = provider.encode_raw(0, &tokens, EncodeKind::Query, &counter)?;
    let q = EncodedQuery::encode(QueryId(0), &raw, &theta)?;
    let first = retrieve(&q, &index, texts.len())?;

    let f_p = f_p.clamp(1, texts.len());
    let pooled = pool_feedback_rows(&first, &index, f_p)?.rows();
    let f_c = PrfConfig::default().f_c.min(pooled);
    let cfg = PrfConfig {
        f_p,
        f_c,
        f_e: f_e.clamp(1, f_c),
        beta,
    };
    cfg.validate()?;
    let set = extract_centroids(QueryId(0), &first, &index, &cfg, SEED)?;
    let cc = select_by_idf(&set, &index, &idf, cfg.f_e)?;
    let teacher = teacher_rerank(&q, &first, &index, &cc, beta)?;

    let expansions = cc
        .nearest_tokens
        .iter()
        .zip(&cc.weights)
        .map(|(t, w)| Expansion {
            token: vocab.surface(*t).unwrap_or("?").to_string(),
            weight: *w,
        })
        .collect();
    let demo = RankDemo {
        maxsim: scored(&first, &texts),
        teacher: scored(&teacher, &texts),
        expansions,
        feedback_passages: cfg.f_p,
        clusters: cfg.f_c,
    };
    Ok(serde_json::to_string(&demo)?)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct KMeansDemo {
    pub centroids: Vec<[f64; 2]>,
    pub assignments: Vec<usize>,
    pub sse_history: Vec<f64>,
}

/// Clusters `points` (a JSON array of `[x, y]` pairs) into `k` groups.
pub fn kmeans_demo_json(points: &str, k: usize, seed: u64) -> Result<String> {
    let pts: Vec<[f64; 2]> = serde_json::from_str(points)?;
    let flat = pts.iter().flatten().copied().collect();
    let m = Matrix::from_vec(pts.len(), 2, flat);
    let res = kmeans(&m, k, seed, DEFAULT_MAX_ITERS, DEFAULT_TOL)?;
    let demo = KMeansDemo {
        centroids: res.centroids.iter_rows().map(|r| [r[0], r[1]]).collect(),
        assignments: res.assignments,
        sse_history: res.sse_history,
    };
    Ok(serde_json::to_string(&demo)?)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PrDemoPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// PR curve over `pairs`, a JSON array of `[score, grade]`, counting
/// grades `>= cutoff` as relevant.
pub fn pr_demo_json(pairs: &str, cutoff: u8) -> Result<String> {
    let pairs: Vec<(f64, u8)> = serde_json::from_str(pairs)?;
    let curve = pr_curve_from_pairs(&pairs, cutoff)?;
    let points: Vec<PrDemoPoint> = curve
        .points
        .iter()
        .map(|p| PrDemoPoint {
            threshold: p.threshold,
            precision: p.precision,
            recall: p.recall,
        })
        .collect();
    Ok(serde_json::to_string(&points)?)
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn rank_demo(
    query: &str,
    passages: &str,
    beta: f64,
    f_p: usize,
    f_e: usize,
) -> std::result::Result<String, JsError> {
    js(rank_demo_json(query, passages, beta, f_p, f_e))
}

#[wasm_bindgen]
pub fn kmeans_demo(points: &str, k: usize, seed: u64) -> std::result::Result<String, JsError> {
    js(kmeans_demo_json(points, k, seed))
}

#[wasm_bindgen]
pub fn pr_demo(pairs: &str, cutoff: u8) -> std::result::Result<String, JsError> {
    js(pr_demo_json(pairs, cutoff))
}
