//! The collective bi-encoder teacher.
//!
//! For each training query the teacher ranks the collection with the
//! pre-trained projection, clusters the projected token rows of the top
//! `f_p` feedback passages into `f_c` centroids, keeps the `f_e` centroids
//! whose nearest vocabulary token is rarest (by IDF), and scores candidates
//! with
//!
//! ```text
//! teacher(q, p) = maxsim(q, p) + beta * sum_n idf_n * max_j <e_n, p_j>
//! ```
//!
//! The centroids are computed once per query and reused for every candidate,
//! so annotation costs one query encoding per query and no passage
//! re-encoding.

pub mod kmeans;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{EmbeddingProvider, EncodeKind, EncodingCounter, Token};
use crate::error::{check_finite, Error, Result};
use crate::ids::{PassageId, QueryId, TokenId};
use crate::index::{feedback_passages, rank_scored, retrieve, EncodedIndex, IdfTable, Ranking};
use crate::linalg::{dot, Matrix};
use crate::relevance::{
    max_inner, maxsim, maxsim_rows, softmax_distribution, EncodedPassage, EncodedQuery, Projection,
    RelevanceDistribution,
};
use crate::seed::derive_seed;

pub use kmeans::{kmeans, KMeansResult, DEFAULT_MAX_ITERS, DEFAULT_TOL};

/// Size of the hard-negative pool (top of the pre-trained ranking).
pub const HARD_NEGATIVE_POOL: usize = 100;
pub const DEFAULT_NEGATIVES_PER_QUERY: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfConfig {
    /// Feedback passages.
    pub f_p: usize,
    /// k-means clusters.
    pub f_c: usize,
    /// Centroids kept after IDF filtering.
    pub f_e: usize,
    pub beta: f64,
}

impl Default for PrfConfig {
    fn default() -> Self {
        Self {
            f_p: 3,
            f_c: 24,
            f_e: 10,
            beta: 1.0,
        }
    }
}

impl PrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f_p == 0 || self.f_c == 0 || self.f_e == 0 {
            return Err(Error::invalid("f_p, f_c and f_e must be positive"));
        }
        if self.f_e > self.f_c {
            return Err(Error::invalid(format!("f_e={} exceeds f_c={}", self.f_e, self.f_c)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta={} must be finite and >= 0", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub query_id: QueryId,
    pub centroids: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveCentroids {
    pub query_id: QueryId,
    /// Selected centroids, one per row, ordered by weight descending.
    pub vectors: Matrix,
    /// IDF of each centroid's nearest vocabulary token.
    pub weights: Vec<f64>,
    pub nearest_tokens: Vec<TokenId>,
    /// Row of each selected centroid in the source [`CentroidSet`].
    pub source_rows: Vec<usize>,
}

/// Pools the projected token rows of the top `f_p` passages and clusters
/// them into `f_c` centroids.
pub fn extract_centroids(
    query_id: QueryId,
    ranking: &Ranking,
    index: &EncodedIndex,
    cfg: &PrfConfig,
    seed: u64,
) -> Result<CentroidSet> {
    let pooled = pool_feedback_rows(ranking, index, cfg.f_p)?;
    if pooled.rows() < cfg.f_c {
        return Err(Error::InsufficientPoints {
            k: cfg.f_c,
            available: pooled.rows(),
        });
    }
    let result = kmeans(&pooled, cfg.f_c, seed, DEFAULT_MAX_ITERS, DEFAULT_TOL)?;
    Ok(CentroidSet {
        query_id,
        centroids: result.centroids,
    })
}

/// Token rows of the top `f_p` passages, concatenated in rank order.
pub fn pool_feedback_rows(ranking: &Ranking, index: &EncodedIndex, f_p: usize) -> Result<Matrix> {
    let feedback = feedback_passages(ranking, f_p)?;
    let mut data = Vec::new();
    let mut rows = 0;
    for pid in feedback {
        let p = index.passage(pid).ok_or(Error::UnknownPassage(pid.0))?;
        data.extend_from_slice(p.rows().as_slice());
        rows += p.rows().rows();
    }
    Ok(Matrix::from_vec(rows, index.dim_out(), data))
}

/// Keeps the `f_e` centroids whose nearest static token has the highest IDF.
pub fn select_by_idf(
    centroids: &CentroidSet,
    index: &EncodedIndex,
    idf: &IdfTable,
    f_e: usize,
) -> Result<CollectiveCentroids> {
    let k = centroids.centroids.rows();
    if f_e == 0 || f_e > k {
        return Err(Error::invalid(format!("f_e={f_e} must be in 1..={k}")));
    }
    let tokens = index.static_token_vectors();
    if tokens.rows() == 0 {
        return Err(Error::invalid("empty vocabulary table"));
    }
    let mut ranked = Vec::with_capacity(k);
    for (m, c) in centroids.centroids.iter_rows().enumerate() {
        // max_inner keeps the first maximum, and ids are sorted ascending
        let (_, row) = max_inner(c, tokens);
        let token = index.static_token_ids()[row];
        let weight = idf
            .get(token)
            .ok_or_else(|| Error::invalid(format!("token {token} missing from IDF table")))?;
        ranked.push((m, token, weight));
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    ranked.truncate(f_e);

    let dim = centroids.centroids.cols();
    let mut vectors = Matrix::zeros(f_e, dim);
    for (n, (m, _, _)) in ranked.iter().enumerate() {
        vectors.row_mut(n).copy_from_slice(centroids.centroids.row(*m));
    }
    Ok(CollectiveCentroids {
        query_id: centroids.query_id,
        vectors,
        weights: ranked.iter().map(|r| r.2).collect(),
        nearest_tokens: ranked.iter().map(|r| r.1).collect(),
        source_rows: ranked.iter().map(|r| r.0).collect(),
    })
}

/// `sum_n weight_n * max_j <e_n, p_j>`.
pub fn centroid_term(passage_rows: &Matrix, cc: &CollectiveCentroids) -> f64 {
    cc.vectors
        .iter_rows()
        .zip(&cc.weights)
        .map(|(e, w)| w * max_inner(e, passage_rows).0)
        .sum()
}

pub fn teacher_score(
    query: &EncodedQuery,
    passage: &EncodedPassage,
    cc: &CollectiveCentroids,
    beta: f64,
) -> Result<f64> {
    let base = maxsim(query, passage)?;
    if cc.vectors.rows() > 0 && cc.vectors.cols() != passage.dim_out() {
        return Err(Error::DimensionMismatch {
            expected: passage.dim_out(),
            actual: cc.vectors.cols(),
        });
    }
    check_finite(beta, "beta")?;
    Ok(base + beta * centroid_term(passage.rows(), cc))
}

/// Samples `count` passages uniformly without replacement from the top
/// `pool_depth` of `ranking`, skipping `positives`. Returned in rank order.
pub fn sample_from_ranking(
    ranking: &Ranking,
    positives: &HashSet<PassageId>,
    count: usize,
    pool_depth: usize,
    seed: u64,
) -> Result<Vec<PassageId>> {
    let pool: Vec<PassageId> = ranking
        .items
        .iter()
        .take(pool_depth)
        .map(|(p, _)| *p)
        .filter(|p| !positives.contains(p))
        .collect();
    if pool.len() < count {
        return Err(Error::PoolTooSmall {
            requested: count,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, pool.len(), count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i]).collect())
}

/// Hard negatives from the top-100 of the pre-trained ranking.
pub fn mine_hard_negatives(
    ranking: &Ranking,
    positives: &HashSet<PassageId>,
    count: usize,
    seed: u64,
) -> Result<Vec<PassageId>> {
    sample_from_ranking(ranking, positives, count, HARD_NEGATIVE_POOL, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLabelSet {
    pub query_id: QueryId,
    /// Observed positive first, then negatives by descending teacher score.
    pub candidates: Vec<PassageId>,
    pub teacher_scores: Vec<f64>,
    pub target: RelevanceDistribution,
    pub observed_positive: PassageId,
}

impl TeacherLabelSet {
    fn validate(&self) -> Result<()> {
        let hits = self.candidates.iter().filter(|&&c| c == self.observed_positive).count();
        if hits != 1 {
            return Err(Error::invalid(format!(
                "query {}: observed positive appears {hits} times",
                self.query_id
            )));
        }
        if self.target.candidates() != self.candidates.as_slice() || self.teacher_scores.len() != self.candidates.len()
        {
            return Err(Error::CandidateMismatch);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Annotation {
    pub labels: TeacherLabelSet,
    pub centroids: CollectiveCentroids,
    pub ranking: Ranking,
}

/// Shared read-only state for annotating queries.
pub struct Annotator<'a> {
    pub index: &'a EncodedIndex,
    pub idf: &'a IdfTable,
    pub provider: &'a EmbeddingProvider,
    pub projection: &'a Projection,
    pub counter: &'a EncodingCounter,
    pub prf: PrfConfig,
    pub negatives_per_query: usize,
    pub seed: u64,
}

impl Annotator<'_> {
    pub fn retrieval_depth(&self) -> usize {
        HARD_NEGATIVE_POOL.max(self.prf.f_p)
    }

    pub fn encode_query(&self, query_id: QueryId, tokens: &[Token]) -> Result<EncodedQuery> {
        let raw = self
            .provider
            .encode_raw(query_id.0, tokens, EncodeKind::Query, self.counter)?;
        EncodedQuery::encode(query_id, &raw, self.projection)
    }

    /// Collective centroids for an already encoded query.
    pub fn centroids_for(&self, query: &EncodedQuery) -> Result<(CollectiveCentroids, Ranking)> {
        self.prf.validate()?;
        let ranking = retrieve(query, self.index, self.retrieval_depth())?;
        let seed = derive_seed(self.seed, query.query_id.0, 0xC1);
        let set = extract_centroids(query.query_id, &ranking, self.index, &self.prf, seed)?;
        let cc = select_by_idf(&set, self.index, self.idf, self.prf.f_e)?;
        Ok((cc, ranking))
    }

    pub fn annotate(&self, query_id: QueryId, tokens: &[Token], observed_positive: PassageId) -> Result<Annotation> {
        let query = self.encode_query(query_id, tokens)?;
        let (cc, ranking) = self.centroids_for(&query)?;
        let positives: HashSet<PassageId> = [observed_positive].into();
        let negatives = mine_hard_negatives(
            &ranking,
            &positives,
            self.negatives_per_query,
            derive_seed(self.seed, query_id.0, 0xA7),
        )?;

        let score = |pid: PassageId| -> Result<f64> {
            let p = self.index.passage(pid).ok_or(Error::UnknownPassage(pid.0))?;
            teacher_score(&query, p, &cc, self.prf.beta)
        };
        let positive_score = score(observed_positive)?;
        let mut scored_negatives = negatives
            .into_iter()
            .map(|pid| score(pid).map(|s| (pid, s)))
            .collect::<Result<Vec<_>>>()?;
        scored_negatives.sort_by(crate::index::ranking_order);

        let mut candidates = vec![observed_positive];
        let mut teacher_scores = vec![positive_score];
        for (pid, s) in scored_negatives {
            candidates.push(pid);
            teacher_scores.push(s);
        }
        let target = softmax_distribution(&candidates, &teacher_scores)?;
        Ok(Annotation {
            labels: TeacherLabelSet {
                query_id,
                candidates,
                teacher_scores,
                target,
                observed_positive,
            },
            centroids: cc,
            ranking,
        })
    }

    /// Annotates every `(query, tokens, observed positive)` triple; output
    /// order follows input order.
    pub fn annotate_all(&self, queries: &[(QueryId, Vec<Token>, PassageId)]) -> Result<Vec<Annotation>> {
        crate::index::map_maybe_parallel(queries, |(qid, toks, pos)| self.annotate(*qid, toks, *pos))
    }
}

/// Re-scores a ranking with the teacher and re-sorts it.
pub fn teacher_rerank(
    query: &EncodedQuery,
    ranking: &Ranking,
    index: &EncodedIndex,
    cc: &CollectiveCentroids,
    beta: f64,
) -> Result<Ranking> {
    let mut scored = Vec::with_capacity(ranking.items.len());
    for (pid, _) in &ranking.items {
        let p = index.passage(*pid).ok_or(Error::UnknownPassage(pid.0))?;
        let s = maxsim_rows(query.rows(), p.rows()) + beta * centroid_term(p.rows(), cc);
        scored.push((*pid, s));
    }
    rank_scored(ranking.query_id, scored, ranking.depth)
}

/// `qid pid teacher_score target_prob is_observed_positive`, tab separated.
pub fn format_label_file(sets: &[TeacherLabelSet]) -> String {
    let mut s = String::new();
    for set in sets {
        for (i, pid) in set.candidates.iter().enumerate() {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                set.query_id,
                pid,
                set.teacher_scores[i],
                set.target.probabilities()[i],
                u8::from(*pid == set.observed_positive)
            ));
        }
    }
    s
}

pub fn write_label_file(sets: &[TeacherLabelSet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_label_file(sets)).map_err(|e| Error::io(path, e))
}

pub fn read_label_file(path: impl AsRef<Path>) -> Result<Vec<TeacherLabelSet>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_file(&content, path)
}

pub fn parse_label_file(content: &str, origin: &Path) -> Result<Vec<TeacherLabelSet>> {
    struct Block {
        qid: QueryId,
        rows: Vec<(PassageId, f64, f64, bool)>,
    }
    let mut blocks: Vec<Block> = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        let qid = QueryId(f[0].parse().map_err(|e| err(format!("bad qid: {e}")))?);
        let pid = PassageId(f[1].parse().map_err(|e| err(format!("bad pid: {e}")))?);
        let score: f64 = f[2].parse().map_err(|e| err(format!("bad teacher score: {e}")))?;
        let prob: f64 = f[3].parse().map_err(|e| err(format!("bad probability: {e}")))?;
        let positive = match f[4] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("bad positive flag {other:?}"))),
        };
        match blocks.last_mut() {
            Some(b) if b.qid == qid => b.rows.push((pid, score, prob, positive)),
            _ => {
                if blocks.iter().any(|b| b.qid == qid) {
                    return Err(err(format!("query {qid} is not contiguous")));
                }
                blocks.push(Block {
                    qid,
                    rows: vec![(pid, score, prob, positive)],
                });
            }
        }
    }
    blocks
        .into_iter()
        .map(|b| {
            let positives: Vec<PassageId> = b.rows.iter().filter(|r| r.3).map(|r| r.0).collect();
            if positives.len() != 1 {
                return Err(Error::invalid(format!(
                    "query {} has {} observed positives",
                    b.qid,
                    positives.len()
                )));
            }
            let candidates: Vec<PassageId> = b.rows.iter().map(|r| r.0).collect();
            let set = TeacherLabelSet {
                query_id: b.qid,
                target: RelevanceDistribution::new(candidates.clone(), b.rows.iter().map(|r| r.2).collect())?,
                teacher_scores: b.rows.iter().map(|r| r.1).collect(),
                candidates,
                observed_positive: positives[0],
            };
            set.validate()?;
            Ok(set)
        })
        .collect()
}

/// Inner product of a centroid with a static token vector; exposed for
/// inspection tools.
pub fn centroid_token_similarity(index: &EncodedIndex, centroid: &[f64], token: TokenId) -> Option<f64> {
    index.static_token_vector(token).map(|v| dot(centroid, v))
}
