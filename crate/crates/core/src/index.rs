//! Passage collection, IDF table and exact top-k late-interaction retrieval.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::embeddings::tsv::TextRecord;
use crate::embeddings::{EmbeddingProvider, EncodeKind, EncodingCounter, RawEmbeddingMatrix, Token, Vocabulary};
use crate::error::{Error, Result};
use crate::ids::{PassageId, QueryId, TokenId};
use crate::linalg::{dot, Matrix};
use crate::relevance::{maxsim_rows, EncodedPassage, EncodedQuery, Projection};

#[derive(Debug, Clone)]
pub struct Corpus {
    passages: BTreeMap<PassageId, Vec<Token>>,
    doc_freq: HashMap<TokenId, u32>,
    tokens: BTreeMap<TokenId, Token>,
}

impl Corpus {
    pub fn new(passages: impl IntoIterator<Item = (PassageId, Vec<Token>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut doc_freq: HashMap<TokenId, u32> = HashMap::new();
        let mut tokens = BTreeMap::new();
        for (pid, toks) in passages {
            if toks.is_empty() {
                return Err(Error::invalid(format!("passage {pid} has no tokens")));
            }
            let mut distinct: Vec<TokenId> = toks.iter().map(|t| t.id).collect();
            distinct.sort_unstable();
            distinct.dedup();
            for id in distinct {
                *doc_freq.entry(id).or_default() += 1;
            }
            for t in &toks {
                tokens.entry(t.id).or_insert_with(|| t.clone());
            }
            if map.insert(pid, toks).is_some() {
                return Err(Error::DuplicateId(pid.0));
            }
        }
        Ok(Self {
            passages: map,
            doc_freq,
            tokens,
        })
    }

    pub fn from_records(records: &[TextRecord], vocab: &mut Vocabulary) -> Result<Self> {
        Self::new(
            records
                .iter()
                .map(|r| (PassageId(r.id), vocab.tokenize(&r.text)))
                .collect::<Vec<_>>(),
        )
    }

    pub fn passage_count(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn tokens(&self, pid: PassageId) -> Option<&[Token]> {
        self.passages.get(&pid).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (PassageId, &[Token])> {
        self.passages.iter().map(|(p, t)| (*p, t.as_slice()))
    }

    pub fn doc_freq(&self, token: TokenId) -> Option<u32> {
        self.doc_freq.get(&token).copied()
    }

    /// Distinct tokens of the collection in id order.
    pub fn vocabulary(&self) -> impl Iterator<Item = &Token> {
        self.tokens.values()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    values: HashMap<TokenId, f64>,
}

impl IdfTable {
    pub fn get(&self, token: TokenId) -> Option<f64> {
        self.values.get(&token).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn from_values(values: HashMap<TokenId, f64>) -> Self {
        Self { values }
    }

    /// `(token, idf)` in token-id order.
    pub fn sorted(&self) -> Vec<(TokenId, f64)> {
        let mut v: Vec<_> = self.values.iter().map(|(k, v)| (*k, *v)).collect();
        v.sort_unstable_by_key(|(k, _)| *k);
        v
    }
}

/// `idf(t) = ln((N + 1) / (df(t) + 1))`.
pub fn build_idf(corpus: &Corpus) -> Result<IdfTable> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = corpus.passage_count() as f64;
    let values = corpus
        .doc_freq
        .iter()
        .map(|(&t, &df)| (t, ((n + 1.0) / (df as f64 + 1.0)).ln()))
        .collect();
    Ok(IdfTable { values })
}

/// Raw embeddings of every passage, plus isolated single-token encodings of
/// the vocabulary when the provider can produce them.
#[derive(Debug, Clone, Default)]
pub struct RawCorpus {
    pub passages: BTreeMap<PassageId, RawEmbeddingMatrix>,
    pub vocabulary: BTreeMap<TokenId, RawEmbeddingMatrix>,
}

/// Encodes each passage exactly once (and each vocabulary token once, on
/// the vocabulary slot of the counter).
pub fn encode_corpus(corpus: &Corpus, provider: &EmbeddingProvider, counter: &EncodingCounter) -> Result<RawCorpus> {
    let items: Vec<(PassageId, &[Token])> = corpus.iter().collect();
    let encoded = map_maybe_parallel(&items, |(pid, toks)| {
        provider
            .encode_raw(pid.0, toks, EncodeKind::Passage, counter)
            .map(|m| (*pid, m))
    })?;
    let mut vocabulary = BTreeMap::new();
    if provider.supports_vocabulary() {
        for tok in corpus.vocabulary() {
            let m = provider.encode_raw(
                tok.id.0 as u64,
                std::slice::from_ref(tok),
                EncodeKind::Vocabulary,
                counter,
            )?;
            vocabulary.insert(tok.id, m);
        }
    }
    Ok(RawCorpus {
        passages: encoded.into_iter().collect(),
        vocabulary,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedIndex {
    passages: Vec<EncodedPassage>,
    positions: HashMap<PassageId, usize>,
    dim_out: usize,
    token_ids: Vec<TokenId>,
    token_vectors: Matrix,
}

impl EncodedIndex {
    /// Assembles an index; passages are reordered by id.
    pub fn from_parts(mut passages: Vec<EncodedPassage>, static_tokens: Vec<(TokenId, Vec<f64>)>) -> Result<Self> {
        let dim_out = passages.first().map(|p| p.dim_out()).ok_or(Error::EmptyInput)?;
        passages.sort_by_key(|p| p.passage_id);
        let mut positions = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if p.dim_out() != dim_out {
                return Err(Error::DimensionMismatch {
                    expected: dim_out,
                    actual: p.dim_out(),
                });
            }
            if positions.insert(p.passage_id, i).is_some() {
                return Err(Error::DuplicateId(p.passage_id.0));
            }
        }
        let mut static_tokens = static_tokens;
        static_tokens.sort_by_key(|(t, _)| *t);
        let mut token_vectors = Matrix::zeros(static_tokens.len(), dim_out);
        let mut token_ids = Vec::with_capacity(static_tokens.len());
        for (i, (t, v)) in static_tokens.into_iter().enumerate() {
            if v.len() != dim_out {
                return Err(Error::DimensionMismatch {
                    expected: dim_out,
                    actual: v.len(),
                });
            }
            token_vectors.row_mut(i).copy_from_slice(&v);
            token_ids.push(t);
        }
        Ok(Self {
            passages,
            positions,
            dim_out,
            token_ids,
            token_vectors,
        })
    }

    /// Projects raw passages with `projection`. Static token vectors come
    /// from the isolated vocabulary encodings when present, otherwise from
    /// the normalized mean of each token's projected occurrences.
    pub fn from_raw(raw: &RawCorpus, corpus: &Corpus, projection: &Projection) -> Result<Self> {
        let items: Vec<(&PassageId, &RawEmbeddingMatrix)> = raw.passages.iter().collect();
        let passages = map_maybe_parallel(&items, |(pid, m)| EncodedPassage::encode(**pid, m, projection))?;

        let mut static_tokens = Vec::new();
        if !raw.vocabulary.is_empty() {
            for (t, m) in &raw.vocabulary {
                let rows = projection.project(t.0 as u64, m)?;
                static_tokens.push((*t, rows.row(0).to_vec()));
            }
        } else {
            let mut sums: BTreeMap<TokenId, Vec<f64>> = BTreeMap::new();
            for p in &passages {
                let toks = corpus
                    .tokens(p.passage_id)
                    .ok_or(Error::UnknownPassage(p.passage_id.0))?;
                for (tok, row) in toks.iter().zip(p.rows().iter_rows()) {
                    let acc = sums.entry(tok.id).or_insert_with(|| vec![0.0; projection.dim_out()]);
                    acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
            }
            for (t, mut v) in sums {
                let n = dot(&v, &v).sqrt();
                if n > 1e-12 {
                    v.iter_mut().for_each(|x| *x /= n);
                    static_tokens.push((t, v));
                }
            }
        }
        Self::from_parts(passages, static_tokens)
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[EncodedPassage] {
        &self.passages
    }

    pub fn passage(&self, pid: PassageId) -> Option<&EncodedPassage> {
        self.positions.get(&pid).map(|&i| &self.passages[i])
    }

    pub fn static_token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    pub fn static_token_vectors(&self) -> &Matrix {
        &self.token_vectors
    }

    pub fn static_token_vector(&self, t: TokenId) -> Option<&[f64]> {
        self.token_ids.binary_search(&t).ok().map(|i| self.token_vectors.row(i))
    }
}

/// Encodes the corpus once and projects it.
pub fn build_index(
    corpus: &Corpus,
    provider: &EmbeddingProvider,
    projection: &Projection,
    counter: &EncodingCounter,
) -> Result<EncodedIndex> {
    if projection.dim_in() != provider.dim_in() {
        return Err(Error::DimensionMismatch {
            expected: provider.dim_in(),
            actual: projection.dim_in(),
        });
    }
    let raw = encode_corpus(corpus, provider, counter)?;
    EncodedIndex::from_raw(&raw, corpus, projection)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub query_id: QueryId,
    pub items: Vec<(PassageId, f64)>,
    pub depth: usize,
}

impl Ranking {
    pub fn passage_ids(&self) -> impl Iterator<Item = PassageId> + '_ {
        self.items.iter().map(|(p, _)| *p)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Descending score, then ascending passage id.
pub fn ranking_order(a: &(PassageId, f64), b: &(PassageId, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Sorts scored passages and keeps the best `depth`.
pub fn rank_scored(query_id: QueryId, mut scored: Vec<(PassageId, f64)>, depth: usize) -> Result<Ranking> {
    if depth < 1 {
        return Err(Error::invalid("depth must be at least 1"));
    }
    let keep = depth.min(scored.len());
    if keep < scored.len() && keep > 0 {
        scored.select_nth_unstable_by(keep - 1, ranking_order);
        scored.truncate(keep);
    }
    scored.sort_unstable_by(ranking_order);
    Ok(Ranking {
        query_id,
        items: scored,
        depth,
    })
}

/// Exhaustive MaxSim over every indexed passage.
pub fn retrieve(query: &EncodedQuery, index: &EncodedIndex, depth: usize) -> Result<Ranking> {
    if depth < 1 {
        return Err(Error::invalid("depth must be at least 1"));
    }
    if query.dim_out() != index.dim_out() {
        return Err(Error::DimensionMismatch {
            expected: index.dim_out(),
            actual: query.dim_out(),
        });
    }
    let scored = map_maybe_parallel(&index.passages, |p| -> Result<(PassageId, f64)> {
        Ok((p.passage_id, maxsim_rows(query.rows(), p.rows())))
    })?;
    rank_scored(query.query_id, scored, depth)
}

/// Single-threaded variant, used for response-time measurement.
pub fn retrieve_sequential(query: &EncodedQuery, index: &EncodedIndex, depth: usize) -> Result<Ranking> {
    if query.dim_out() != index.dim_out() {
        return Err(Error::DimensionMismatch {
            expected: index.dim_out(),
            actual: query.dim_out(),
        });
    }
    let scored = index
        .passages
        .iter()
        .map(|p| (p.passage_id, maxsim_rows(query.rows(), p.rows())))
        .collect();
    rank_scored(query.query_id, scored, depth)
}

/// The top `f_p` passages of a ranking, in rank order.
pub fn feedback_passages(ranking: &Ranking, f_p: usize) -> Result<Vec<PassageId>> {
    if f_p == 0 || f_p > ranking.items.len() {
        return Err(Error::invalid(format!(
            "f_p={f_p} but ranking has {} items",
            ranking.items.len()
        )));
    }
    Ok(ranking.items[..f_p].iter().map(|(p, _)| *p).collect())
}

/// `qid Q0 pid rank score tag`, score with six decimals.
pub fn format_run(rankings: &[Ranking], tag: &str) -> String {
    let mut s = String::new();
    for r in rankings {
        for (rank, (pid, score)) in r.items.iter().enumerate() {
            s.push_str(&format!(
                "{} Q0 {} {} {:.6} {}\n",
                r.query_id,
                pid,
                rank + 1,
                score,
                tag
            ));
        }
    }
    s
}

pub fn write_run(rankings: &[Ranking], tag: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_run(rankings, tag)).map_err(|e| Error::io(path, e))
}

pub fn read_run(path: impl AsRef<Path>) -> Result<Vec<Ranking>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run(&content, path)
}

/// Rankings grouped by query (in first-appearance order), items by rank.
pub fn parse_run(content: &str, origin: &Path) -> Result<Vec<Ranking>> {
    let mut order: Vec<QueryId> = Vec::new();
    let mut rows: HashMap<QueryId, Vec<(usize, PassageId, f64)>> = HashMap::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let qid = QueryId(fields[0].parse().map_err(|e| err(format!("bad qid: {e}")))?);
        let pid = PassageId(fields[2].parse().map_err(|e| err(format!("bad pid: {e}")))?);
        let rank: usize = fields[3].parse().map_err(|e| err(format!("bad rank: {e}")))?;
        let score: f64 = fields[4].parse().map_err(|e| err(format!("bad score: {e}")))?;
        let entry = rows.entry(qid).or_insert_with(|| {
            order.push(qid);
            Vec::new()
        });
        entry.push((rank, pid, score));
    }
    Ok(order
        .into_iter()
        .map(|qid| {
            let mut items = rows.remove(&qid).unwrap_or_default();
            items.sort_by_key(|(rank, _, _)| *rank);
            let depth = items.len().max(1);
            Ranking {
                query_id: qid,
                items: items.into_iter().map(|(_, p, s)| (p, s)).collect(),
                depth,
            }
        })
        .collect())
}

#[cfg(feature = "parallel")]
pub(crate) fn map_maybe_parallel<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_maybe_parallel<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    F: Fn(&T) -> Result<U>,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingProviderConfig;

    fn corpus(texts: &[&str], vocab: &mut Vocabulary) -> Corpus {
        Corpus::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| (PassageId(i as u64), vocab.tokenize(t)))
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn idf_values() {
        let mut v = Vocabulary::new();
        let texts: Vec<String> = (0..100)
            .map(|i| {
                if i == 0 {
                    "the rare".to_string()
                } else {
                    format!("the w{}", i % 7)
                }
            })
            .collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let c = corpus(&refs, &mut v);
        let idf = build_idf(&c).unwrap();
        assert_eq!(idf.get(v.get("the").unwrap()), Some(0.0));
        let rare = idf.get(v.get("rare").unwrap()).unwrap();
        assert!((rare - (101.0f64 / 2.0).ln()).abs() < 1e-12);
        assert!((rare - 3.9220).abs() < 5e-5);
        // w2..w6 each occur in the same number of passages
        assert_eq!(idf.get(v.get("w2").unwrap()), idf.get(v.get("w3").unwrap()));
        assert!(idf.get(v.get("w0").unwrap()).unwrap() >= 0.0);
    }

    #[test]
    fn empty_corpus_has_no_idf() {
        let c = Corpus::new(Vec::new()).unwrap();
        assert!(matches!(build_idf(&c), Err(Error::EmptyInput)));
    }

    #[test]
    fn doc_freq_counts_documents_not_occurrences() {
        let mut v = Vocabulary::new();
        let c = corpus(&["a a a b", "a c"], &mut v);
        assert_eq!(c.doc_freq(v.get("a").unwrap()), Some(2));
        assert_eq!(c.doc_freq(v.get("b").unwrap()), Some(1));
    }

    #[test]
    fn duplicate_passage_ids_rejected() {
        let mut v = Vocabulary::new();
        let t = v.tokenize("x");
        let err = Corpus::new(vec![(PassageId(1), t.clone()), (PassageId(1), t)]).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(1)));
    }

    fn setup() -> (Vocabulary, Corpus, EmbeddingProvider, Projection) {
        let mut v = Vocabulary::new();
        let c = corpus(
            &[
                "alpha beta gamma",
                "beta delta",
                "gamma gamma epsilon",
                "zeta eta theta",
                "alpha",
            ],
            &mut v,
        );
        let provider = EmbeddingProvider::new(EmbeddingProviderConfig::hashed(12, 5, 1)).unwrap();
        let proj = Projection::random(6, 12, 9);
        (v, c, provider, proj)
    }

    #[test]
    fn build_index_counts_and_normalizes() {
        let (_, c, provider, proj) = setup();
        let counter = EncodingCounter::new();
        let index = build_index(&c, &provider, &proj, &counter).unwrap();
        let snap = counter.snapshot();
        assert_eq!(snap.passage_encodings, c.passage_count() as u64);
        assert_eq!(snap.query_encodings, 0);
        assert_eq!(snap.vocabulary_encodings, c.vocabulary_size() as u64);
        for p in index.passages() {
            for r in p.rows().iter_rows() {
                assert!((dot(r, r).sqrt() - 1.0).abs() < 1e-6);
            }
        }
        let again = build_index(&c, &provider, &proj, &EncodingCounter::new()).unwrap();
        assert_eq!(index, again);
    }

    #[test]
    fn build_index_rejects_dim_mismatch() {
        let (_, c, provider, _) = setup();
        let proj = Projection::random(6, 13, 9);
        let counter = EncodingCounter::new();
        assert!(build_index(&c, &provider, &proj, &counter).is_err());
        assert_eq!(counter.snapshot().passage_encodings, 0);
    }

    #[test]
    fn exact_token_match_ranks_first() {
        let (mut v, c, provider, proj) = setup();
        let index = build_index(&c, &provider, &proj, &EncodingCounter::new()).unwrap();
        // same text as passage 2, hence identical contextual rows
        let toks = v.tokenize("gamma gamma epsilon");
        let raw = provider
            .encode_raw(0, &toks, EncodeKind::Query, &EncodingCounter::new())
            .unwrap();
        let q = EncodedQuery::encode(QueryId(0), &raw, &proj).unwrap();
        let r = retrieve(&q, &index, 3).unwrap();
        assert_eq!(r.items[0].0, PassageId(2));
        assert!((r.items[0].1 - 3.0).abs() < 1e-9);
        assert_eq!(r.items.len(), 3);
        assert!(retrieve(&q, &index, 0).is_err());
        assert_eq!(retrieve(&q, &index, 50).unwrap().items.len(), 5);
    }

    #[test]
    fn ties_break_by_passage_id() {
        let scored = vec![(PassageId(9), 1.0), (PassageId(3), 1.0), (PassageId(5), 2.0)];
        let r = rank_scored(QueryId(1), scored, 3).unwrap();
        let ids: Vec<u64> = r.passage_ids().map(|p| p.0).collect();
        assert_eq!(ids, vec![5, 3, 9]);
    }

    #[test]
    fn feedback_slices() {
        let r = Ranking {
            query_id: QueryId(1),
            items: vec![
                (PassageId(7), 3.0),
                (PassageId(2), 2.0),
                (PassageId(4), 1.0),
                (PassageId(1), 0.0),
            ],
            depth: 4,
        };
        assert_eq!(feedback_passages(&r, 1).unwrap(), vec![PassageId(7)]);
        assert_eq!(feedback_passages(&r, 3).unwrap().len(), 3);
        assert_eq!(feedback_passages(&r, 4).unwrap(), r.passage_ids().collect::<Vec<_>>());
        assert!(feedback_passages(&r, 5).is_err());
    }

    #[test]
    fn run_file_round_trip_to_six_decimals() {
        let r = Ranking {
            query_id: QueryId(3),
            items: vec![(PassageId(10), 2.123_456_789), (PassageId(4), -0.5)],
            depth: 2,
        };
        let text = format_run(std::slice::from_ref(&r), "tag");
        assert_eq!(text.lines().next().unwrap(), "3 Q0 10 1 2.123457 tag");
        let back = parse_run(&text, Path::new("run")).unwrap();
        assert_eq!(back[0].items[0].0, PassageId(10));
        assert!((back[0].items[0].1 - 2.123457).abs() < 1e-12);
    }
}
