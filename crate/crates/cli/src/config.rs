//! Pipeline configuration: one TOML file plus `--set section.key=value`
//! overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crank::collective::PrfConfig;
use crank::distill::{NegativesSource, Objective, TrainConfig};
use crank::embeddings::{EmbeddingProviderConfig, ProviderKind};

use crate::Invalid;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub provider: ProviderSection,
    pub projection: ProjectionSection,
    pub prf: PrfSection,
    pub train: TrainSection,
    pub retrieval: RetrievalSection,
    pub eval: EvalSection,
    /// Worker threads for parallel stages; `None` lets rayon decide.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub passages: PathBuf,
    pub queries: PathBuf,
    pub train_qrels: PathBuf,
    pub eval_qrels: Option<PathBuf>,
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            passages: "passages.tsv".into(),
            queries: "queries.tsv".into(),
            train_qrels: "qrels.train.txt".into(),
            eval_qrels: None,
            work_dir: "work".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderChoice {
    Hashed,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: ProviderChoice,
    pub dim_in: usize,
    pub seed: u64,
    pub context_window: usize,
    /// Passage embeddings (file provider).
    pub embeddings: Option<PathBuf>,
    /// Query embeddings (file provider).
    pub query_embeddings: Option<PathBuf>,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            kind: ProviderChoice::Hashed,
            dim_in: crank::embeddings::DEFAULT_DIM_IN,
            seed: 0,
            context_window: crank::embeddings::DEFAULT_CONTEXT_WINDOW,
            embeddings: None,
            query_embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub dim_out: usize,
    pub seed: u64,
    /// Pre-trained projection; a seeded random one is used when absent.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        Self {
            dim_out: 16,
            seed: 0,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrfSection {
    pub f_p: usize,
    pub f_c: usize,
    pub f_e: usize,
    pub beta: f64,
    pub negatives_per_query: usize,
    pub seed: u64,
}

impl Default for PrfSection {
    fn default() -> Self {
        let d = PrfConfig::default();
        Self {
            f_p: d.f_p,
            f_c: d.f_c,
            f_e: d.f_e,
            beta: d.beta,
            negatives_per_query: crank::collective::DEFAULT_NEGATIVES_PER_QUERY,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveChoice {
    KdKl,
    HardCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativesChoice {
    Top100Hard,
    Bm25LikeRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub objective: ObjectiveChoice,
    pub negatives_source: NegativesChoice,
    pub gradient_clip: Option<f64>,
    /// Sample size when `negatives_source = "bm25_like_random"`.
    pub random_negatives: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            seed: d.seed,
            objective: ObjectiveChoice::KdKl,
            negatives_source: NegativesChoice::Top100Hard,
            gradient_clip: d.gradient_clip,
            random_negatives: crank::collective::DEFAULT_NEGATIVES_PER_QUERY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub depth: usize,
    pub mrt_repetitions: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            depth: 1000,
            mrt_repetitions: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub binary_cutoff: u8,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            binary_cutoff: crank::evalkit::DEFAULT_BINARY_CUTOFF,
        }
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Invalid(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for s in sections {
        cur = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Invalid(format!("`{s}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), override_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Reads `path` (when given), applies overrides and resolves relative
    /// paths against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let (mut table, base) = match path {
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| Invalid(format!("cannot read config {}: {e}", p.display())))?;
                let table: toml::Table = toml::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", p.display())))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Invalid(format!("config: {e}")))?;
        cfg.resolve(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.passages);
        fix(&mut self.paths.queries);
        fix(&mut self.paths.train_qrels);
        fix(&mut self.paths.work_dir);
        for p in [
            &mut self.paths.eval_qrels,
            &mut self.provider.embeddings,
            &mut self.provider.query_embeddings,
            &mut self.projection.checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let positive = |v: usize, name: &str| {
            if v == 0 {
                Err(Invalid(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive(self.provider.dim_in, "provider.dim_in")?;
        positive(self.projection.dim_out, "projection.dim_out")?;
        positive(self.retrieval.depth, "retrieval.depth")?;
        positive(self.retrieval.mrt_repetitions, "retrieval.mrt_repetitions")?;
        if let Some(0) = self.threads {
            return Err(Invalid("threads must be positive".into()).into());
        }
        if self.provider.kind == ProviderChoice::File
            && (self.provider.embeddings.is_none() || self.provider.query_embeddings.is_none())
        {
            return Err(Invalid("file provider needs provider.embeddings and provider.query_embeddings".into()).into());
        }
        self.prf_config().validate().map_err(|e| Invalid(e.to_string()))?;
        self.train_config().validate().map_err(|e| Invalid(e.to_string()))?;
        if !(1..=crank::evalkit::MAX_GRADE).contains(&self.eval.binary_cutoff) {
            return Err(Invalid("eval.binary_cutoff must be in 1..=3".into()).into());
        }
        Ok(())
    }

    /// Fails unless every path exists.
    pub fn require(paths: &[&Path]) -> anyhow::Result<()> {
        for p in paths {
            if !p.exists() {
                return Err(Invalid(format!("missing input: {}", p.display())).into());
            }
        }
        Ok(())
    }

    pub fn provider_config(&self) -> EmbeddingProviderConfig {
        let p = &self.provider;
        match p.kind {
            ProviderChoice::Hashed => EmbeddingProviderConfig::hashed(p.dim_in, p.seed, p.context_window),
            ProviderChoice::File => EmbeddingProviderConfig {
                kind: ProviderKind::FileBacked,
                dim_in: p.dim_in,
                seed: p.seed,
                context_window: p.context_window,
                path: p.embeddings.clone(),
                query_path: p.query_embeddings.clone(),
            },
        }
    }

    pub fn prf_config(&self) -> PrfConfig {
        PrfConfig {
            f_p: self.prf.f_p,
            f_c: self.prf.f_c,
            f_e: self.prf.f_e,
            beta: self.prf.beta,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            seed: t.seed,
            objective: match t.objective {
                ObjectiveChoice::KdKl => Objective::KdKl,
                ObjectiveChoice::HardCe => Objective::HardCe,
            },
            negatives_source: match t.negatives_source {
                NegativesChoice::Top100Hard => NegativesSource::Top100Hard,
                NegativesChoice::Bm25LikeRandom => NegativesSource::Bm25LikeRandom,
            },
            gradient_clip: t.gradient_clip,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (resolved, overridden) configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn index_dir(&self) -> PathBuf {
        self.paths.work_dir.join("index")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.paths.work_dir.join("runs")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.paths.work_dir.join("reports")
    }

    pub fn labels_path(&self) -> PathBuf {
        self.paths.work_dir.join("labels.tsv")
    }

    pub fn student_path(&self) -> PathBuf {
        self.paths.work_dir.join("student.crwt")
    }
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_parse_types() {
        let mut t: toml::Table = toml::from_str("[prf]\nbeta = 1.0\n").unwrap();
        apply_override(&mut t, "prf.beta=0.5").unwrap();
        apply_override(&mut t, "train.objective=hard_ce").unwrap();
        apply_override(&mut t, "threads=2").unwrap();
        let cfg: PipelineConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.prf.beta, 0.5);
        assert_eq!(cfg.train.objective, ObjectiveChoice::HardCe);
        assert_eq!(cfg.threads, Some(2));
        assert!(apply_override(&mut toml::Table::new(), "nonsense").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.prf.beta = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let back: PipelineConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_prf_is_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.prf.f_e = 30;
        assert!(cfg.validate().is_err());
    }
}
