//! The pipeline stages. Each loads what it needs from the configured inputs
//! and the work directory, and persists its outputs with a `.meta` sidecar.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::{info, warn};

use crank::collective::{read_label_file, write_label_file, Annotator};
use crank::distill::{
    read_checkpoint, train_student, with_random_negatives, write_checkpoint, NegativesSource, RawStore,
};
use crank::embeddings::tsv::{read_text_records, write_text_records};
use crank::embeddings::{EmbeddingProvider, EncodeKind, EncodingCounter, Token, Vocabulary};
use crank::evalkit::{evaluate, measure_mrt, pr_curve, sweep, EvalConfig, Qrels, SweepEvalSet, SweepGrid};
use crank::index::{build_idf, encode_corpus, read_run, retrieve, write_run, Corpus, EncodedIndex, Ranking};
use crank::relevance::{EncodedQuery, Projection};
use crank::synthetic::{generate, SyntheticConfig};
use crank::{PassageId, QueryId};

use crate::artifacts::{self, Meta};
use crate::config::{ensure_dir, PipelineConfig};
use crate::Invalid;

/// Tokenized text inputs. The vocabulary is built from the passages first
/// and then extended by the queries, so token ids are stable across stages.
struct Inputs {
    vocabulary: Vocabulary,
    corpus: Corpus,
    queries: BTreeMap<QueryId, Vec<Token>>,
}

impl Inputs {
    fn load(cfg: &PipelineConfig) -> anyhow::Result<Self> {
        PipelineConfig::require(&[&cfg.paths.passages, &cfg.paths.queries])?;
        let passages = read_text_records(&cfg.paths.passages)?;
        let query_records = read_text_records(&cfg.paths.queries)?;
        let mut vocabulary = Vocabulary::new();
        let corpus = Corpus::from_records(&passages, &mut vocabulary)?;
        let mut queries = BTreeMap::new();
        for q in &query_records {
            if queries.insert(QueryId(q.id), vocabulary.tokenize(&q.text)).is_some() {
                return Err(Invalid(format!("duplicate query id {}", q.id)).into());
            }
        }
        Ok(Self {
            vocabulary,
            corpus,
            queries,
        })
    }

    fn tokens(&self, qid: QueryId) -> anyhow::Result<&[Token]> {
        self.queries
            .get(&qid)
            .map(Vec::as_slice)
            .ok_or_else(|| Invalid(format!("unknown query id {qid}")).into())
    }
}

fn provider(cfg: &PipelineConfig) -> anyhow::Result<EmbeddingProvider> {
    if let (Some(p), Some(q)) = (&cfg.provider.embeddings, &cfg.provider.query_embeddings) {
        PipelineConfig::require(&[p, q])?;
    }
    Ok(EmbeddingProvider::new(cfg.provider_config())?)
}

/// The pre-trained projection θ: the configured checkpoint, else the one
/// persisted by `index`.
fn theta(cfg: &PipelineConfig) -> anyhow::Result<Projection> {
    let path = cfg
        .projection
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.index_dir().join(artifacts::THETA_FILE));
    PipelineConfig::require(&[&path])?;
    Ok(read_checkpoint(&path)?)
}

fn initial_theta(cfg: &PipelineConfig) -> anyhow::Result<Projection> {
    match &cfg.projection.checkpoint {
        Some(p) => {
            PipelineConfig::require(&[p])?;
            Ok(read_checkpoint(p)?)
        }
        None => Ok(Projection::random(
            cfg.projection.dim_out,
            cfg.provider.dim_in,
            cfg.projection.seed,
        )),
    }
}

fn encode_queries(
    inputs: &Inputs,
    ids: &[QueryId],
    provider: &EmbeddingProvider,
    projection: &Projection,
    counter: &EncodingCounter,
) -> anyhow::Result<Vec<EncodedQuery>> {
    ids.iter()
        .map(|&qid| {
            let raw = provider.encode_raw(qid.0, inputs.tokens(qid)?, EncodeKind::Query, counter)?;
            Ok(EncodedQuery::encode(qid, &raw, projection)?)
        })
        .collect()
}

fn read_qrels(path: &Path) -> anyhow::Result<Qrels> {
    PipelineConfig::require(&[path])?;
    Ok(Qrels::read(path)?)
}

fn eval_qrels_path(cfg: &PipelineConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.paths.eval_qrels.clone())
        .unwrap_or_else(|| cfg.paths.train_qrels.clone())
}

pub fn index(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let inputs = Inputs::load(cfg)?;
    let provider = provider(cfg)?;
    let theta = initial_theta(cfg)?;
    let counter = EncodingCounter::new();
    let raw = encode_corpus(&inputs.corpus, &provider, &counter)?;
    let index = EncodedIndex::from_raw(&raw, &inputs.corpus, &theta)?;
    let idf = build_idf(&inputs.corpus)?;

    let dir = cfg.index_dir();
    // Only the passage vocabulary belongs to the index; queries are
    // tokenized again by later stages.
    let surfaces = &inputs.vocabulary.surfaces()[..inputs.corpus.vocabulary_size()];
    artifacts::write_index(&dir, &index, &idf, surfaces)?;
    write_checkpoint(&theta, dir.join(artifacts::THETA_FILE))?;
    let counts = counter.snapshot();
    let meta = Meta::new("index", cfg).with_counters(counts);
    for f in [
        artifacts::PASSAGES_FILE,
        artifacts::STATIC_TOKENS_FILE,
        artifacts::VOCAB_FILE,
        artifacts::IDF_FILE,
        artifacts::THETA_FILE,
    ] {
        meta.write_for(&dir.join(f))?;
    }
    println!("passages\t{}", index.len());
    println!("vocabulary\t{}", inputs.corpus.vocabulary_size());
    println!("passage_encodings\t{}", counts.passage_encodings);
    println!("vocabulary_encodings\t{}", counts.vocabulary_encodings);
    println!("query_encodings\t{}", counts.query_encodings);
    Ok(())
}

pub struct RankArgs {
    pub checkpoint: Option<PathBuf>,
    pub depth: Option<usize>,
    pub tag: String,
    pub queries: Vec<u64>,
    pub out: Option<PathBuf>,
}

pub fn rank(cfg: &PipelineConfig, args: RankArgs) -> anyhow::Result<PathBuf> {
    let inputs = Inputs::load(cfg)?;
    let provider = provider(cfg)?;
    let counter = EncodingCounter::new();
    let depth = args.depth.unwrap_or(cfg.retrieval.depth);
    if depth == 0 {
        return Err(Invalid("depth must be positive".into()).into());
    }
    let ids: Vec<QueryId> = if args.queries.is_empty() {
        inputs.queries.keys().copied().collect()
    } else {
        args.queries.iter().map(|&q| QueryId(q)).collect()
    };
    for &q in &ids {
        inputs.tokens(q)?;
    }

    let (projection, index) = match &args.checkpoint {
        Some(path) => {
            PipelineConfig::require(&[path])?;
            let w = read_checkpoint(path)?;
            let raw = encode_corpus(&inputs.corpus, &provider, &counter)?;
            let index = EncodedIndex::from_raw(&raw, &inputs.corpus, &w)?;
            (w, index)
        }
        None => (theta(cfg)?, artifacts::read_index(&cfg.index_dir())?),
    };
    let queries = encode_queries(&inputs, &ids, &provider, &projection, &counter)?;
    let rankings = queries
        .iter()
        .map(|q| retrieve(q, &index, depth))
        .collect::<crank::Result<Vec<_>>>()?;
    let mrt = measure_mrt(&queries, &index, depth, cfg.retrieval.mrt_repetitions)?;

    let out = args
        .out
        .unwrap_or_else(|| cfg.runs_dir().join(format!("{}.run", args.tag)));
    if let Some(parent) = out.parent() {
        ensure_dir(parent)?;
    }
    write_run(&rankings, &args.tag, &out)?;
    Meta::new("rank", cfg)
        .with_counters(counter.snapshot())
        .with_value("depth", depth as f64)
        .with_value("mrt_ms", mrt)
        .write_for(&out)?;
    println!("queries\t{}", rankings.len());
    println!("mrt_ms\t{mrt:.3}");
    println!("run\t{}", out.display());
    Ok(out)
}

/// Highest-graded judged passage, smallest id on ties; `None` when every
/// judgment is zero.
fn observed_positive(judged: &HashMap<PassageId, u8>) -> Option<PassageId> {
    judged
        .iter()
        .filter(|(_, &g)| g > 0)
        .max_by(|(pa, ga), (pb, gb)| ga.cmp(gb).then(pb.cmp(pa)))
        .map(|(p, _)| *p)
}

pub fn annotate(cfg: &PipelineConfig, out: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let qrels = read_qrels(&cfg.paths.train_qrels)?;
    let inputs = Inputs::load(cfg)?;
    let provider = provider(cfg)?;
    let theta = theta(cfg)?;
    let dir = cfg.index_dir();
    let index = artifacts::read_index(&dir)?;
    let idf = artifacts::read_idf(&dir)?;
    let counter = EncodingCounter::new();

    let mut batch = Vec::new();
    let mut skipped = 0usize;
    for qid in qrels.queries() {
        let judged = qrels.judged(qid).expect("listed query has judgments");
        match observed_positive(judged) {
            Some(pos) => batch.push((qid, inputs.tokens(qid)?.to_vec(), pos)),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("{skipped} training queries have no observed positive and were skipped");
    }
    if batch.is_empty() {
        return Err(Invalid("no training query has an observed positive".into()).into());
    }

    let annotator = Annotator {
        index: &index,
        idf: &idf,
        provider: &provider,
        projection: &theta,
        counter: &counter,
        prf: cfg.prf_config(),
        negatives_per_query: cfg.prf.negatives_per_query,
        seed: cfg.prf.seed,
    };
    let annotations = annotator.annotate_all(&batch)?;
    let sets: Vec<_> = annotations.into_iter().map(|a| a.labels).collect();

    let out = out.unwrap_or_else(|| cfg.labels_path());
    if let Some(parent) = out.parent() {
        ensure_dir(parent)?;
    }
    write_label_file(&sets, &out)?;
    let counts = counter.snapshot();
    Meta::new("annotate", cfg)
        .with_counters(counts)
        .with_value("skipped_queries", skipped as f64)
        .write_for(&out)?;
    println!("annotated\t{}", sets.len());
    println!("skipped\t{skipped}");
    println!("query_encodings\t{}", counts.query_encodings);
    println!("passage_encodings\t{}", counts.passage_encodings);
    println!("labels\t{}", out.display());
    Ok(out)
}

pub fn distill(cfg: &PipelineConfig, labels: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let labels_path = labels.unwrap_or_else(|| cfg.labels_path());
    PipelineConfig::require(&[&labels_path])?;
    let mut sets = read_label_file(&labels_path)?;
    let inputs = Inputs::load(cfg)?;
    let provider = provider(cfg)?;
    let theta = theta(cfg)?;
    if theta.dim_in() != provider.dim_in() {
        return Err(crank::Error::DimensionMismatch {
            expected: provider.dim_in(),
            actual: theta.dim_in(),
        }
        .into());
    }
    let train = cfg.train_config();
    let counter = EncodingCounter::new();

    if train.negatives_source == NegativesSource::Bm25LikeRandom {
        let index = artifacts::read_index(&cfg.index_dir())?;
        let ids: Vec<QueryId> = sets.iter().map(|s| s.query_id).collect();
        let queries = encode_queries(&inputs, &ids, &provider, &theta, &counter)?;
        let rankings: HashMap<QueryId, Ranking> = queries
            .iter()
            .map(|q| Ok((q.query_id, retrieve(q, &index, crank::distill::RANDOM_NEGATIVE_POOL)?)))
            .collect::<crank::Result<_>>()?;
        sets = with_random_negatives(&sets, &rankings, cfg.train.random_negatives, train.seed)?;
    }

    let mut raw = RawStore::default();
    let needed: BTreeSet<PassageId> = sets.iter().flat_map(|s| s.candidates.iter().copied()).collect();
    for pid in needed {
        let tokens = inputs.corpus.tokens(pid).ok_or(crank::Error::UnknownPassage(pid.0))?;
        raw.passages
            .insert(pid, provider.encode_raw(pid.0, tokens, EncodeKind::Passage, &counter)?);
    }
    for s in &sets {
        let m = provider.encode_raw(s.query_id.0, inputs.tokens(s.query_id)?, EncodeKind::Query, &counter)?;
        raw.queries.insert(s.query_id, m);
    }

    let report = train_student(&sets, &raw, &theta, &train)?;
    let out = out.unwrap_or_else(|| cfg.student_path());
    if let Some(parent) = out.parent() {
        ensure_dir(parent)?;
    }
    write_checkpoint(&report.projection, &out)?;
    let meta = Meta::new("distill", cfg)
        .with_counters(counter.snapshot())
        .with_value("steps", report.steps as f64);
    meta.write_for(&out)?;

    let mut loss = String::from("epoch\tmean_loss\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        writeln!(loss, "{}\t{l}", e + 1).unwrap();
        info!("epoch {} loss {l:.6}", e + 1);
    }
    let loss_path = out.with_extension("loss.tsv");
    fs::write(&loss_path, loss).with_context(|| format!("writing {}", loss_path.display()))?;
    meta.write_for(&loss_path)?;
    println!("epochs\t{}", report.epoch_losses.len());
    println!("steps\t{}", report.steps);
    if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
        println!("loss\t{first:.6}\t{last:.6}");
    }
    println!("checkpoint\t{}", out.display());
    Ok(out)
}

pub struct EvalArgs {
    pub run: PathBuf,
    pub qrels: Option<PathBuf>,
    pub cutoff: Option<u8>,
    pub out: Option<PathBuf>,
    pub pr_curve: Option<PathBuf>,
}

pub fn eval(cfg: &PipelineConfig, args: EvalArgs) -> anyhow::Result<PathBuf> {
    PipelineConfig::require(&[&args.run])?;
    let qrels = read_qrels(&eval_qrels_path(cfg, args.qrels))?;
    let rankings = read_run(&args.run)?;
    let mrt = Meta::read_for(&args.run)?
        .and_then(|m| m.values.get("mrt_ms").copied())
        .unwrap_or(0.0);
    let binary_cutoff = args.cutoff.unwrap_or(cfg.eval.binary_cutoff);
    let ecfg = EvalConfig {
        binary_cutoff,
        ..EvalConfig::default()
    };
    let report = evaluate(&rankings, &qrels, &ecfg, mrt).map_err(|e| match e {
        crank::Error::EmptyInput => anyhow::Error::from(Invalid("run and qrels share no query".into())),
        other => other.into(),
    })?;
    print!("{}", report.to_table());

    let stem = args
        .run
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let out = args
        .out
        .unwrap_or_else(|| cfg.reports_dir().join(format!("{stem}.metrics.tsv")));
    if let Some(parent) = out.parent() {
        ensure_dir(parent)?;
    }
    fs::write(&out, report.to_tsv()).with_context(|| format!("writing {}", out.display()))?;
    Meta::new("eval", cfg).write_for(&out)?;

    if let Some(pr) = args.pr_curve {
        let scores: Vec<_> = rankings
            .iter()
            .flat_map(|r| r.items.iter().map(move |(p, s)| (r.query_id, *p, *s)))
            .collect();
        let curve = pr_curve(&scores, &qrels, binary_cutoff)?;
        fs::write(&pr, curve.to_tsv()).with_context(|| format!("writing {}", pr.display()))?;
        Meta::new("eval", cfg).write_for(&pr)?;
    }
    Ok(out)
}

pub fn sweep_cmd(cfg: &PipelineConfig, qrels: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let qrels = read_qrels(&eval_qrels_path(cfg, qrels))?;
    let inputs = Inputs::load(cfg)?;
    let provider = provider(cfg)?;
    let theta = theta(cfg)?;
    let dir = cfg.index_dir();
    let index = artifacts::read_index(&dir)?;
    let idf = artifacts::read_idf(&dir)?;
    let counter = EncodingCounter::new();
    let ids: Vec<QueryId> = qrels.queries().filter(|q| inputs.queries.contains_key(q)).collect();
    if ids.is_empty() {
        return Err(Invalid("qrels and queries share no query".into()).into());
    }
    let queries = encode_queries(&inputs, &ids, &provider, &theta, &counter)?;
    let eval = SweepEvalSet {
        index: &index,
        idf: &idf,
        queries: &queries,
        qrels: &qrels,
        depth: cfg.retrieval.depth,
        seed: cfg.prf.seed,
        binary_cutoff: cfg.eval.binary_cutoff,
    };
    let result = sweep(&cfg.prf_config(), &SweepGrid::default(), &eval)?;
    let tsv = result.to_tsv();
    print!("{tsv}");
    let out = out.unwrap_or_else(|| cfg.reports_dir().join("sweep.tsv"));
    if let Some(parent) = out.parent() {
        ensure_dir(parent)?;
    }
    fs::write(&out, tsv).with_context(|| format!("writing {}", out.display()))?;
    Meta::new("sweep", cfg)
        .with_counters(counter.snapshot())
        .write_for(&out)?;
    Ok(out)
}

pub struct SyntheticArgs {
    pub out: PathBuf,
    pub queries: Option<usize>,
    pub fillers: Option<usize>,
    pub seed: u64,
}

pub fn gen_synthetic(args: SyntheticArgs) -> anyhow::Result<()> {
    let defaults = SyntheticConfig::default();
    let scfg = SyntheticConfig {
        queries: args.queries.unwrap_or(defaults.queries),
        filler_passages: args.fillers.unwrap_or(defaults.filler_passages),
        seed: args.seed,
        ..defaults
    };
    scfg.validate().map_err(|e| Invalid(e.to_string()))?;
    let ds = generate(&scfg)?;
    ensure_dir(&args.out)?;
    let out = &args.out;
    write_text_records(&ds.passages, out.join("passages.tsv"))?;
    write_text_records(&ds.queries, out.join("queries.tsv"))?;
    ds.train_qrels.write(out.join("qrels.train.txt"))?;
    ds.full_qrels.write(out.join("qrels.full.txt"))?;
    let mut unl = String::new();
    for (q, ps) in &ds.unlabeled {
        for p in ps {
            writeln!(unl, "{q}\t{p}").unwrap();
        }
    }
    fs::write(out.join("unlabeled.tsv"), unl).context("writing unlabeled.tsv")?;

    let mut cfg = PipelineConfig::default();
    cfg.paths.eval_qrels = Some("qrels.full.txt".into());
    cfg.provider.seed = args.seed;
    cfg.projection.seed = args.seed;
    cfg.prf.seed = args.seed;
    cfg.train.seed = args.seed;
    fs::write(out.join("crank.toml"), cfg.to_toml()).context("writing crank.toml")?;
    println!("passages\t{}", ds.passages.len());
    println!("queries\t{}", ds.queries.len());
    println!("config\t{}", out.join("crank.toml").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observed_positive_prefers_grade_then_smaller_id() {
        let j: HashMap<PassageId, u8> = [(PassageId(5), 2), (PassageId(3), 2), (PassageId(9), 1)].into();
        assert_eq!(observed_positive(&j), Some(PassageId(3)));
        let j: HashMap<PassageId, u8> = [(PassageId(5), 1), (PassageId(7), 3)].into();
        assert_eq!(observed_positive(&j), Some(PassageId(7)));
        let j: HashMap<PassageId, u8> = [(PassageId(5), 0)].into();
        assert_eq!(observed_positive(&j), None);
    }
}
