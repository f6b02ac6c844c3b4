//! Topic-structured synthetic corpus with planted unlabeled positives.
//!
//! Every query `q = [s_a, s_b, k]` pairs two words from a small shared pool
//! of surface words with a topic key term. Per query the generator plants:
//!
//! - one labeled passage: surface words, key term and every topic term;
//! - unlabeled positives: key term and topic terms, no surface words;
//! - distractors: the surface words in off-topic context;
//!
//! plus filler passages drawn from a generic vocabulary.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collective::{Annotator, PrfConfig};
use crate::distill::RawStore;
use crate::embeddings::tsv::TextRecord;
use crate::embeddings::{EmbeddingProvider, EmbeddingProviderConfig, EncodeKind, EncodingCounter, Token, Vocabulary};
use crate::error::{Error, Result};
use crate::evalkit::Qrels;
use crate::ids::{PassageId, QueryId};
use crate::index::{build_idf, encode_corpus, retrieve, Corpus, EncodedIndex, IdfTable, Ranking, RawCorpus};
use crate::relevance::{EncodedQuery, Projection};

pub const LABELED_GRADE: u8 = 3;
pub const UNLABELED_GRADE: u8 = 2;
pub const DISTRACTOR_GRADE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub queries: usize,
    pub unlabeled_per_query: usize,
    pub distractors_per_query: usize,
    pub filler_passages: usize,
    pub topic_terms: usize,
    pub surface_vocab: usize,
    pub generic_vocab: usize,
    /// Passages are padded with generic words up to this many tokens.
    pub min_passage_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            queries: 50,
            unlabeled_per_query: 3,
            distractors_per_query: 6,
            filler_passages: 100,
            topic_terms: 8,
            surface_vocab: 12,
            generic_vocab: 60,
            min_passage_len: 24,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 {
            return Err(Error::invalid("queries must be positive"));
        }
        if self.surface_vocab < 2 {
            return Err(Error::invalid("surface_vocab must be at least 2"));
        }
        if self.generic_vocab < 8 {
            return Err(Error::invalid("generic_vocab must be at least 8"));
        }
        if self.topic_terms == 0 {
            return Err(Error::invalid("topic_terms must be positive"));
        }
        Ok(())
    }

    pub fn passage_count(&self) -> usize {
        self.queries * (1 + self.unlabeled_per_query + self.distractors_per_query) + self.filler_passages
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub passages: Vec<TextRecord>,
    pub queries: Vec<TextRecord>,
    /// Labeled positives only, graded 3.
    pub train_qrels: Qrels,
    /// Labeled 3, unlabeled positives 2, distractors 1, two fillers 0.
    pub full_qrels: Qrels,
    pub labeled: BTreeMap<QueryId, PassageId>,
    pub unlabeled: BTreeMap<QueryId, Vec<PassageId>>,
    pub distractors: BTreeMap<QueryId, Vec<PassageId>>,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Distinct pronounceable pseudo-words.
fn words(n: usize, taken: &mut HashSet<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Labeled,
    Unlabeled,
    Distractor,
    Filler,
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = HashSet::new();
    let surface = words(cfg.surface_vocab, &mut taken, &mut rng);
    let generic = words(cfg.generic_vocab, &mut taken, &mut rng);

    let pick = |pool: &[String], n: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..n).map(|_| pool.choose(rng).unwrap().clone()).collect()
    };

    let mut queries = Vec::with_capacity(cfg.queries);
    let mut drafts: Vec<(Option<usize>, Role, Vec<String>)> = Vec::new();
    let mut topics = Vec::with_capacity(cfg.queries);
    for _ in 0..cfg.queries {
        let key = words(1, &mut taken, &mut rng).remove(0);
        let terms = words(cfg.topic_terms, &mut taken, &mut rng);
        topics.push((key, terms));
    }
    for (q, (key, terms)) in topics.iter().enumerate() {
        let s: Vec<String> = surface.choose_multiple(&mut rng, 2).cloned().collect();
        queries.push(TextRecord {
            id: q as u64,
            text: format!("{} {} {}", s[0], s[1], key),
        });

        let mut labeled = vec![s[0].clone(), s[1].clone(), key.clone()];
        labeled.extend(terms.iter().cloned());
        labeled.extend(pick(&generic, 2, &mut rng));
        drafts.push((Some(q), Role::Labeled, labeled));

        for _ in 0..cfg.unlabeled_per_query {
            let mut u = vec![key.clone()];
            u.extend(terms.iter().cloned());
            u.extend(pick(&generic, 3, &mut rng));
            drafts.push((Some(q), Role::Unlabeled, u));
        }
        for _ in 0..cfg.distractors_per_query {
            let mut d = s.clone();
            d.extend(pick(&generic, 6, &mut rng));
            // a little vocabulary from some other topic keeps distractors on-topic elsewhere
            if topics.len() > 1 {
                let o = (q + rng.random_range(1..topics.len())) % topics.len();
                d.extend(topics[o].1.choose_multiple(&mut rng, 2).cloned());
            }
            drafts.push((Some(q), Role::Distractor, d));
        }
    }
    for _ in 0..cfg.filler_passages {
        let mut f = pick(&generic, 8, &mut rng);
        if rng.random_bool(0.3) {
            f.push(surface.choose(&mut rng).unwrap().clone());
        }
        drafts.push((None, Role::Filler, f));
    }

    for (_, _, toks) in &mut drafts {
        let pad = cfg.min_passage_len.saturating_sub(toks.len());
        toks.extend(pick(&generic, pad, &mut rng));
    }
    drafts.shuffle(&mut rng);
    let mut ds = SyntheticDataset {
        passages: Vec::with_capacity(drafts.len()),
        queries,
        train_qrels: Qrels::new(),
        full_qrels: Qrels::new(),
        labeled: BTreeMap::new(),
        unlabeled: BTreeMap::new(),
        distractors: BTreeMap::new(),
    };
    let mut fillers = Vec::new();
    for (pid, (owner, role, mut toks)) in drafts.into_iter().enumerate() {
        toks.shuffle(&mut rng);
        let pid = PassageId(pid as u64);
        ds.passages.push(TextRecord {
            id: pid.0,
            text: toks.join(" "),
        });
        let Some(q) = owner else {
            fillers.push(pid);
            continue;
        };
        let qid = QueryId(q as u64);
        match role {
            Role::Labeled => {
                ds.labeled.insert(qid, pid);
                ds.train_qrels.insert(qid, pid, LABELED_GRADE)?;
                ds.full_qrels.insert(qid, pid, LABELED_GRADE)?;
            }
            Role::Unlabeled => {
                ds.unlabeled.entry(qid).or_default().push(pid);
                ds.full_qrels.insert(qid, pid, UNLABELED_GRADE)?;
            }
            Role::Distractor => {
                ds.distractors.entry(qid).or_default().push(pid);
                ds.full_qrels.insert(qid, pid, DISTRACTOR_GRADE)?;
            }
            Role::Filler => {}
        }
    }
    // a couple of judged non-relevant passages per query
    for q in 0..cfg.queries {
        for &pid in fillers.choose_multiple(&mut rng, 2) {
            ds.full_qrels.insert(QueryId(q as u64), pid, 0)?;
        }
    }
    Ok(ds)
}

/// Mean fraction of each query's planted unlabeled positives found in the
/// top `k` of its ranking.
pub fn unlabeled_recall_at(
    rankings: &[crate::index::Ranking],
    unlabeled: &BTreeMap<QueryId, Vec<PassageId>>,
    k: usize,
) -> f64 {
    let per_query: Vec<f64> = rankings
        .iter()
        .filter_map(|r| {
            let planted = unlabeled.get(&r.query_id).filter(|v| !v.is_empty())?;
            let hits = r.passage_ids().take(k).filter(|p| planted.contains(p)).count();
            Some(hits as f64 / planted.len() as f64)
        })
        .collect();
    if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().sum::<f64>() / per_query.len() as f64
    }
}

/// A synthetic dataset encoded with the hashed provider and indexed under a
/// seeded random projection, ready for annotation and training.
pub struct Workbench {
    pub dataset: SyntheticDataset,
    pub vocabulary: Vocabulary,
    pub corpus: Corpus,
    pub provider: EmbeddingProvider,
    pub theta: Projection,
    pub raw_corpus: RawCorpus,
    pub index: EncodedIndex,
    pub idf: IdfTable,
    pub raw: RawStore,
    /// `(query, tokens, labeled positive)` in query-id order.
    pub queries: Vec<(QueryId, Vec<Token>, PassageId)>,
    pub counter: EncodingCounter,
}

impl Workbench {
    pub fn new(dataset: SyntheticDataset, dim_in: usize, dim_out: usize, seed: u64) -> Result<Self> {
        let mut vocabulary = Vocabulary::new();
        let corpus = Corpus::from_records(&dataset.passages, &mut vocabulary)?;
        let provider = EmbeddingProvider::new(EmbeddingProviderConfig::hashed(dim_in, seed, 2))?;
        let theta = Projection::random(dim_out, dim_in, seed ^ 0x7E7A);
        let counter = EncodingCounter::new();
        let raw_corpus = encode_corpus(&corpus, &provider, &counter)?;
        let index = EncodedIndex::from_raw(&raw_corpus, &corpus, &theta)?;
        let idf = build_idf(&corpus)?;
        let mut raw = RawStore {
            passages: raw_corpus.passages.clone(),
            ..RawStore::default()
        };
        let mut queries = Vec::with_capacity(dataset.queries.len());
        for q in &dataset.queries {
            let qid = QueryId(q.id);
            let tokens = vocabulary.tokenize(&q.text);
            raw.queries
                .insert(qid, provider.encode_raw(q.id, &tokens, EncodeKind::Query, &counter)?);
            let positive = *dataset.labeled.get(&qid).ok_or(Error::UnknownQuery(q.id))?;
            queries.push((qid, tokens, positive));
        }
        Ok(Self {
            dataset,
            vocabulary,
            corpus,
            provider,
            theta,
            raw_corpus,
            index,
            idf,
            raw,
            queries,
            counter,
        })
    }

    pub fn annotator(&self, prf: PrfConfig, negatives_per_query: usize, seed: u64) -> Annotator<'_> {
        Annotator {
            index: &self.index,
            idf: &self.idf,
            provider: &self.provider,
            projection: &self.theta,
            counter: &self.counter,
            prf,
            negatives_per_query,
            seed,
        }
    }

    /// Rankings of every query under `projection`, re-projecting the corpus.
    pub fn rankings(&self, projection: &Projection, depth: usize) -> Result<Vec<Ranking>> {
        let index = EncodedIndex::from_raw(&self.raw_corpus, &self.corpus, projection)?;
        self.queries
            .iter()
            .map(|(qid, _, _)| {
                let q = EncodedQuery::encode(*qid, &self.raw.queries[qid], projection)?;
                retrieve(&q, &index, depth)
            })
            .collect()
    }

    /// Mean Recall@`k` of the planted unlabeled positives under `projection`.
    pub fn unlabeled_recall(&self, projection: &Projection, k: usize) -> Result<f64> {
        Ok(unlabeled_recall_at(
            &self.rankings(projection, k)?,
            &self.dataset.unlabeled,
            k,
        ))
    }
}
