//! Per-token embedding matrices for queries and passages.
//!
//! Two providers stand in for a contextual encoder:
//!
//! * [`ProviderKind::HashedDeterministic`] draws a unit-norm base vector per
//!   token id from a seeded ChaCha stream and mixes it with the mean base
//!   vector of its neighbours (`0.7 * self + 0.3 * context`), which gives
//!   cheap position-dependent "contextualization".
//! * [`ProviderKind::FileBacked`] serves matrices computed elsewhere, read
//!   from the binary format in [`file`].
//!
//! Every successful [`EmbeddingProvider::encode_raw`] call bumps exactly one
//! slot of the shared [`EncodingCounter`].

pub mod file;
pub mod tsv;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ids::TokenId;

pub use file::{read_embedding_file, write_embedding_file};

/// Weight of a token's own base vector in the hashed provider.
pub const SELF_WEIGHT: f64 = 0.7;
/// Weight of the neighbourhood mean in the hashed provider.
pub const CONTEXT_WEIGHT: f64 = 0.3;

pub const DEFAULT_DIM_IN: usize = 32;
pub const DEFAULT_CONTEXT_WINDOW: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub id: TokenId,
    pub surface: String,
}

/// Interning table from lower-cased surface forms to dense ids.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    ids: HashMap<String, TokenId>,
    surfaces: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, surface: &str) -> TokenId {
        if let Some(&id) = self.ids.get(surface) {
            return id;
        }
        let id = TokenId(self.surfaces.len() as u32);
        self.surfaces.push(surface.to_owned());
        self.ids.insert(surface.to_owned(), id);
        id
    }

    pub fn get(&self, surface: &str) -> Option<TokenId> {
        self.ids.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id.0 as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    /// Whitespace split plus lower-casing; every token is interned.
    pub fn tokenize(&mut self, text: &str) -> Vec<Token> {
        text.split_whitespace()
            .map(|w| {
                let surface = w.to_lowercase();
                let id = self.intern(&surface);
                Token { id, surface }
            })
            .collect()
    }

    /// Surfaces in id order.
    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    /// Rebuilds a vocabulary from surfaces listed in id order.
    pub fn from_surfaces<I, S>(surfaces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for s in surfaces {
            let s = s.into();
            let expected = vocab.len();
            if vocab.intern(&s).0 as usize != expected {
                return Err(Error::invalid(format!("duplicate vocabulary entry {s:?}")));
            }
        }
        Ok(vocab)
    }
}

/// Dense `token_count x dim_in` matrix of raw (unprojected) token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEmbeddingMatrix {
    token_count: usize,
    dim_in: usize,
    values: Vec<f32>,
}

impl RawEmbeddingMatrix {
    pub fn new(token_count: usize, dim_in: usize, values: Vec<f32>) -> Result<Self> {
        if token_count == 0 || dim_in == 0 {
            return Err(Error::EmptyInput);
        }
        if values.len() != token_count * dim_in {
            return Err(Error::DimensionMismatch {
                expected: token_count * dim_in,
                actual: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                value: *v as f64,
                context: "raw embedding",
            });
        }
        Ok(Self {
            token_count,
            dim_in,
            values,
        })
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim_in..(i + 1) * self.dim_in]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    HashedDeterministic,
    FileBacked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingProviderConfig {
    pub kind: ProviderKind,
    pub dim_in: usize,
    pub seed: u64,
    /// Neighbours considered on each side (hashed provider only).
    pub context_window: usize,
    /// Passage embeddings (file-backed only).
    pub path: Option<PathBuf>,
    /// Query embeddings (file-backed only); ids live in their own namespace.
    pub query_path: Option<PathBuf>,
}

impl EmbeddingProviderConfig {
    pub fn hashed(dim_in: usize, seed: u64, context_window: usize) -> Self {
        Self {
            kind: ProviderKind::HashedDeterministic,
            dim_in,
            seed,
            context_window,
            path: None,
            query_path: None,
        }
    }
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        Self::hashed(DEFAULT_DIM_IN, 0, DEFAULT_CONTEXT_WINDOW)
    }
}

/// What an encoder invocation was for; selects the counter slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeKind {
    Query,
    Passage,
    /// Single-token encodings for the static nearest-token table.
    Vocabulary,
}

#[derive(Debug, Default)]
pub struct EncodingCounter {
    query: AtomicU64,
    passage: AtomicU64,
    vocabulary: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CounterSnapshot {
    pub query_encodings: u64,
    pub passage_encodings: u64,
    pub vocabulary_encodings: u64,
}

impl EncodingCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, kind: EncodeKind) {
        let slot = match kind {
            EncodeKind::Query => &self.query,
            EncodeKind::Passage => &self.passage,
            EncodeKind::Vocabulary => &self.vocabulary,
        };
        slot.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            query_encodings: self.query.load(Ordering::Relaxed),
            passage_encodings: self.passage.load(Ordering::Relaxed),
            vocabulary_encodings: self.vocabulary.load(Ordering::Relaxed),
        }
    }
}

impl CounterSnapshot {
    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            query_encodings: self.query_encodings - earlier.query_encodings,
            passage_encodings: self.passage_encodings - earlier.passage_encodings,
            vocabulary_encodings: self.vocabulary_encodings - earlier.vocabulary_encodings,
        }
    }
}

#[derive(Debug)]
pub struct EmbeddingProvider {
    cfg: EmbeddingProviderConfig,
    passages: HashMap<u64, RawEmbeddingMatrix>,
    queries: HashMap<u64, RawEmbeddingMatrix>,
}

impl EmbeddingProvider {
    pub fn new(cfg: EmbeddingProviderConfig) -> Result<Self> {
        if cfg.dim_in == 0 {
            return Err(Error::invalid("dim_in must be positive"));
        }
        let mut provider = Self {
            cfg,
            passages: HashMap::new(),
            queries: HashMap::new(),
        };
        if provider.cfg.kind == ProviderKind::FileBacked {
            let path = provider
                .cfg
                .path
                .clone()
                .ok_or_else(|| Error::invalid("file-backed provider needs a passage path"))?;
            provider.passages = load_table(&path, provider.cfg.dim_in)?;
            if let Some(qpath) = provider.cfg.query_path.clone() {
                provider.queries = load_table(&qpath, provider.cfg.dim_in)?;
            }
        }
        Ok(provider)
    }

    pub fn config(&self) -> &EmbeddingProviderConfig {
        &self.cfg
    }

    pub fn dim_in(&self) -> usize {
        self.cfg.dim_in
    }

    pub fn supports_vocabulary(&self) -> bool {
        self.cfg.kind == ProviderKind::HashedDeterministic
    }

    /// Encodes one token sequence. `id` is the query or passage id; the
    /// hashed provider ignores it, the file-backed provider looks it up.
    pub fn encode_raw(
        &self,
        id: u64,
        tokens: &[Token],
        kind: EncodeKind,
        counter: &EncodingCounter,
    ) -> Result<RawEmbeddingMatrix> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let matrix = match self.cfg.kind {
            ProviderKind::HashedDeterministic => {
                hashed_encode(tokens, self.cfg.dim_in, self.cfg.seed, self.cfg.context_window)
            }
            ProviderKind::FileBacked => {
                let table = match kind {
                    EncodeKind::Query => &self.queries,
                    EncodeKind::Passage => &self.passages,
                    EncodeKind::Vocabulary => {
                        return Err(Error::invalid(
                            "file-backed provider cannot encode isolated vocabulary tokens",
                        ))
                    }
                };
                let m = table.get(&id).ok_or(Error::MissingEmbedding(id))?;
                if m.token_count() != tokens.len() {
                    return Err(Error::TokenCountMismatch {
                        id,
                        expected: tokens.len(),
                        actual: m.token_count(),
                    });
                }
                m.clone()
            }
        };
        counter.record(kind);
        Ok(matrix)
    }
}

fn load_table(path: &std::path::Path, dim_in: usize) -> Result<HashMap<u64, RawEmbeddingMatrix>> {
    let (dim, entries) = read_embedding_file(path)?;
    if dim != dim_in {
        return Err(Error::DimensionMismatch {
            expected: dim_in,
            actual: dim,
        });
    }
    let mut table = HashMap::with_capacity(entries.len());
    for (id, m) in entries {
        if table.insert(id, m).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(table)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unit-norm base vector of a token: `dim_in` standard normals from a
/// ChaCha8 stream seeded with `splitmix64(seed ^ splitmix64(token_id))`,
/// divided by their L2 norm.
pub fn base_vector(token: TokenId, dim_in: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(token.0 as u64)));
    let mut v: Vec<f64> = (0..dim_in).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn hashed_encode(tokens: &[Token], dim_in: usize, seed: u64, window: usize) -> RawEmbeddingMatrix {
    let bases: Vec<Vec<f64>> = tokens.iter().map(|t| base_vector(t.id, dim_in, seed)).collect();
    let n = tokens.len();
    let mut values = Vec::with_capacity(n * dim_in);
    let mut context = vec![0.0; dim_in];
    for t in 0..n {
        let lo = t.saturating_sub(window);
        let hi = (t + window).min(n - 1);
        let neighbours = (lo..=hi).filter(|&s| s != t);
        context.iter_mut().for_each(|c| *c = 0.0);
        let mut count = 0usize;
        for s in neighbours {
            for (c, b) in context.iter_mut().zip(&bases[s]) {
                *c += b;
            }
            count += 1;
        }
        if count == 0 {
            values.extend(bases[t].iter().map(|&b| b as f32));
        } else {
            let inv = 1.0 / count as f64;
            values.extend(
                bases[t]
                    .iter()
                    .zip(&context)
                    .map(|(&b, &c)| (SELF_WEIGHT * b + CONTEXT_WEIGHT * c * inv) as f32),
            );
        }
    }
    RawEmbeddingMatrix {
        token_count: n,
        dim_in,
        values,
    }
}
