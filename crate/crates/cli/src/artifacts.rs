//! On-disk layout of the work directory and the metadata sidecars that
//! accompany every artifact.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crank::embeddings::{read_embedding_file, write_embedding_file, CounterSnapshot, RawEmbeddingMatrix};
use crank::index::{EncodedIndex, IdfTable};
use crank::linalg::{norm, Matrix};
use crank::relevance::EncodedPassage;
use crank::{PassageId, TokenId};

use crate::config::{ensure_dir, PipelineConfig};
use crate::Invalid;

pub const PASSAGES_FILE: &str = "passages.crnk";
pub const STATIC_TOKENS_FILE: &str = "static_tokens.crnk";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const IDF_FILE: &str = "idf.tsv";
pub const THETA_FILE: &str = "theta.crwt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub provider: u64,
    pub projection: u64,
    pub prf: u64,
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub query_encodings: u64,
    pub passage_encodings: u64,
    pub vocabulary_encodings: u64,
}

impl From<CounterSnapshot> for Counters {
    fn from(s: CounterSnapshot) -> Self {
        Self {
            query_encodings: s.query_encodings,
            passage_encodings: s.passage_encodings,
            vocabulary_encodings: s.vocabulary_encodings,
        }
    }
}

/// Provenance sidecar written next to each artifact as `<file>.meta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub command: String,
    pub config_hash: String,
    pub threads: usize,
    pub seeds: Seeds,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counters: Option<Counters>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub values: BTreeMap<String, f64>,
}

impl Meta {
    pub fn new(command: &str, cfg: &PipelineConfig) -> Self {
        Self {
            command: command.to_string(),
            config_hash: cfg.hash(),
            threads: rayon::current_num_threads(),
            seeds: Seeds {
                provider: cfg.provider.seed,
                projection: cfg.projection.seed,
                prf: cfg.prf.seed,
                train: cfg.train.seed,
            },
            counters: None,
            values: BTreeMap::new(),
        }
    }

    pub fn with_counters(mut self, c: CounterSnapshot) -> Self {
        self.counters = Some(c.into());
        self
    }

    pub fn with_value(mut self, key: &str, v: f64) -> Self {
        self.values.insert(key.to_string(), v);
        self
    }

    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut s = artifact.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    pub fn write_for(&self, artifact: &Path) -> anyhow::Result<()> {
        let path = Self::path_for(artifact);
        let text = toml::to_string(self).expect("meta serializes");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read_for(artifact: &Path) -> anyhow::Result<Option<Self>> {
        let path = Self::path_for(artifact);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let meta = toml::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())))?;
        Ok(Some(meta))
    }
}

fn to_f32_matrix(rows: &Matrix) -> anyhow::Result<RawEmbeddingMatrix> {
    let values = rows.as_slice().iter().map(|&v| v as f32).collect();
    Ok(RawEmbeddingMatrix::new(rows.rows(), rows.cols(), values)?)
}

/// Widens stored rows back to `f64` and restores exact unit norm lost to
/// the `f32` round trip.
fn unit_rows(m: &RawEmbeddingMatrix) -> Matrix {
    let mut out = Matrix::zeros(m.token_count(), m.dim_in());
    for i in 0..m.token_count() {
        let row = out.row_mut(i);
        for (o, &v) in row.iter_mut().zip(m.row(i)) {
            *o = f64::from(v);
        }
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

pub fn write_index(dir: &Path, index: &EncodedIndex, idf: &IdfTable, vocab: &[String]) -> anyhow::Result<()> {
    ensure_dir(dir)?;
    let passages = index
        .passages()
        .iter()
        .map(|p| Ok((p.passage_id.0, to_f32_matrix(p.rows())?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_embedding_file(&passages, dir.join(PASSAGES_FILE))?;

    let vectors = index.static_token_vectors();
    let tokens = index
        .static_token_ids()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let row = vectors.row(i).iter().map(|&v| v as f32).collect();
            Ok((u64::from(t.0), RawEmbeddingMatrix::new(1, vectors.cols(), row)?))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_embedding_file(&tokens, dir.join(STATIC_TOKENS_FILE))?;

    let mut v = String::new();
    for s in vocab {
        writeln!(v, "{s}").unwrap();
    }
    fs::write(dir.join(VOCAB_FILE), v).context("writing vocabulary")?;

    let mut t = String::new();
    for (tok, w) in idf.sorted() {
        writeln!(t, "{}\t{w}", tok.0).unwrap();
    }
    fs::write(dir.join(IDF_FILE), t).context("writing idf table")?;
    Ok(())
}

pub fn read_index(dir: &Path) -> anyhow::Result<EncodedIndex> {
    PipelineConfig::require(&[&dir.join(PASSAGES_FILE), &dir.join(STATIC_TOKENS_FILE)])?;
    let (_, entries) = read_embedding_file(dir.join(PASSAGES_FILE))?;
    let passages = entries
        .iter()
        .map(|(id, m)| EncodedPassage::new(PassageId(*id), unit_rows(m)))
        .collect::<crank::Result<Vec<_>>>()?;
    let (_, tokens) = read_embedding_file(dir.join(STATIC_TOKENS_FILE))?;
    let statics = tokens
        .iter()
        .map(|(id, m)| {
            let t = u32::try_from(*id).map_err(|_| Invalid(format!("token id {id} out of range")))?;
            Ok((TokenId(t), unit_rows(m).row(0).to_vec()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(EncodedIndex::from_parts(passages, statics)?)
}

pub fn read_idf(dir: &Path) -> anyhow::Result<IdfTable> {
    let path = dir.join(IDF_FILE);
    PipelineConfig::require(&[&path])?;
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut values = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let bad = || Invalid(format!("{}:{}: expected `token_id<TAB>idf`", path.display(), n + 1));
        let (t, w) = line.split_once('\t').ok_or_else(bad)?;
        let t: u32 = t.parse().map_err(|_| bad())?;
        let w: f64 = w.parse().map_err(|_| bad())?;
        values.insert(TokenId(t), w);
    }
    Ok(IdfTable::from_values(values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("x.run");
        let meta = Meta::new("rank", &PipelineConfig::default()).with_value("mrt_ms", 1.5);
        meta.write_for(&art).unwrap();
        assert_eq!(Meta::read_for(&art).unwrap(), Some(meta));
        assert_eq!(Meta::read_for(&dir.path().join("missing")).unwrap(), None);
    }

    #[test]
    fn unit_rows_renormalizes() {
        let m = RawEmbeddingMatrix::new(2, 2, vec![3.0, 4.0, 0.6, 0.8]).unwrap();
        let u = unit_rows(&m);
        assert!((u.row(0)[0] - 0.6).abs() < 1e-12);
        assert!((norm(u.row(1)) - 1.0).abs() < 1e-12);
    }
}
