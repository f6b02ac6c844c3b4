//! Ranking evaluation: graded qrels, MRR/NDCG/Recall, response time,
//! precision-recall curves and the one-at-a-time PRF sweep.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::collective::{extract_centroids, select_by_idf, teacher_rerank, PrfConfig};
use crate::error::{Error, Result};
use crate::ids::{PassageId, QueryId};
use crate::index::{retrieve, retrieve_sequential, EncodedIndex, IdfTable, Ranking};
use crate::relevance::EncodedQuery;
use crate::seed::derive_seed;

pub const MAX_GRADE: u8 = 3;
pub const DEFAULT_BINARY_CUTOFF: u8 = 2;

/// Graded judgments on the 0..=3 scale.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    by_query: BTreeMap<QueryId, HashMap<PassageId, u8>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: QueryId, pid: PassageId, grade: u8) -> Result<()> {
        if grade > MAX_GRADE {
            return Err(Error::invalid(format!("grade {grade} outside 0..={MAX_GRADE}")));
        }
        self.by_query.entry(qid).or_default().insert(pid, grade);
        Ok(())
    }

    /// Missing judgments count as grade 0.
    pub fn grade(&self, qid: QueryId, pid: PassageId) -> u8 {
        self.by_query.get(&qid).and_then(|m| m.get(&pid)).copied().unwrap_or(0)
    }

    pub fn judged(&self, qid: QueryId) -> Option<&HashMap<PassageId, u8>> {
        self.by_query.get(&qid)
    }

    pub fn queries(&self) -> impl Iterator<Item = QueryId> + '_ {
        self.by_query.keys().copied()
    }

    pub fn query_count(&self) -> usize {
        self.by_query.len()
    }

    pub fn relevant(&self, qid: QueryId, cutoff: u8) -> Vec<PassageId> {
        let mut v: Vec<PassageId> = self
            .by_query
            .get(&qid)
            .map(|m| m.iter().filter(|(_, &g)| g >= cutoff).map(|(p, _)| *p).collect())
            .unwrap_or_default();
        v.sort_unstable();
        v
    }

    /// Sorted `(qid, pid, grade)` triples.
    pub fn iter(&self) -> impl Iterator<Item = (QueryId, PassageId, u8)> + '_ {
        self.by_query.iter().flat_map(|(q, m)| {
            let mut rows: Vec<_> = m.iter().map(|(p, g)| (*q, *p, *g)).collect();
            rows.sort_unstable();
            rows
        })
    }

    /// TREC `qid 0 pid grade`.
    pub fn parse(content: &str, origin: &Path) -> Result<Self> {
        let mut q = Self::new();
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            let qid = QueryId(f[0].parse().map_err(|e| err(format!("bad qid: {e}")))?);
            let pid = PassageId(f[2].parse().map_err(|e| err(format!("bad pid: {e}")))?);
            let grade: u8 = f[3].parse().map_err(|e| err(format!("bad grade: {e}")))?;
            q.insert(qid, pid, grade).map_err(|e| err(e.to_string()))?;
        }
        Ok(q)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&content, path)
    }

    pub fn format(&self) -> String {
        let mut s = String::new();
        for (q, p, g) in self.iter() {
            let _ = writeln!(s, "{q} 0 {p} {g}");
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.format()).map_err(|e| Error::io(path, e))
    }
}

/// Reciprocal rank of the first passage graded `>= cutoff` within the top `k`.
pub fn mrr_at_k(ranking: &Ranking, qrels: &Qrels, k: usize, cutoff: u8) -> f64 {
    ranking
        .passage_ids()
        .take(k)
        .position(|p| qrels.grade(ranking.query_id, p) >= cutoff)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

fn dcg(grades: impl Iterator<Item = u8>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// Graded NDCG (gain `2^g - 1`, discount `1 / log2(rank + 1)`); `None` when
/// the query has no judged-relevant passage.
pub fn ndcg_at_k(ranking: &Ranking, qrels: &Qrels, k: usize) -> Option<f64> {
    let judged = qrels.judged(ranking.query_id)?;
    let mut ideal: Vec<u8> = judged.values().copied().filter(|&g| g > 0).collect();
    if ideal.is_empty() {
        return None;
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    let actual = dcg(ranking.passage_ids().take(k).map(|p| qrels.grade(ranking.query_id, p)));
    Some(actual / idcg)
}

/// Fraction of passages graded `>= cutoff` found in the top `k`; `None` when
/// there are none.
pub fn recall_at_k(ranking: &Ranking, qrels: &Qrels, k: usize, cutoff: u8) -> Option<f64> {
    let relevant = qrels.relevant(ranking.query_id, cutoff);
    if relevant.is_empty() {
        return None;
    }
    let hits = ranking
        .passage_ids()
        .take(k)
        .filter(|p| relevant.binary_search(p).is_ok())
        .count();
    Some(hits as f64 / relevant.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub binary_cutoff: u8,
    pub mrr_k: usize,
    pub ndcg_k: usize,
    pub recall_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            binary_cutoff: DEFAULT_BINARY_CUTOFF,
            mrr_k: 10,
            ndcg_k: 10,
            recall_k: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryMetrics {
    pub mrr: f64,
    pub ndcg: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mrr_at_10: f64,
    pub ndcg_at_10: f64,
    pub recall_at_1000: f64,
    pub mrt_ms: f64,
    pub per_query: BTreeMap<QueryId, QueryMetrics>,
    pub config: EvalConfig,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Evaluates every ranking whose query has judgments.
pub fn evaluate(rankings: &[Ranking], qrels: &Qrels, cfg: &EvalConfig, mrt_ms: f64) -> Result<MetricsReport> {
    let mut per_query = BTreeMap::new();
    for r in rankings {
        if qrels.judged(r.query_id).is_none() {
            continue;
        }
        per_query.insert(
            r.query_id,
            QueryMetrics {
                mrr: mrr_at_k(r, qrels, cfg.mrr_k, cfg.binary_cutoff),
                ndcg: ndcg_at_k(r, qrels, cfg.ndcg_k),
                recall: recall_at_k(r, qrels, cfg.recall_k, cfg.binary_cutoff),
            },
        );
    }
    if per_query.is_empty() {
        return Err(Error::invalid("run and qrels share no query ids"));
    }
    Ok(MetricsReport {
        mrr_at_10: mean(per_query.values().map(|m| m.mrr)),
        ndcg_at_10: mean(per_query.values().filter_map(|m| m.ndcg)),
        recall_at_1000: mean(per_query.values().filter_map(|m| m.recall)),
        mrt_ms: mrt_ms.max(0.0),
        per_query,
        config: *cfg,
    })
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<16} {:>10.4}", format!("MRR@{}", c.mrr_k), self.mrr_at_10);
        let _ = writeln!(s, "{:<16} {:>10.4}", format!("NDCG@{}", c.ndcg_k), self.ndcg_at_10);
        let _ = writeln!(s, "{:<16} {:>10.4}", format!("R@{}", c.recall_k), self.recall_at_1000);
        let _ = writeln!(s, "{:<16} {:>10.3}", "MRT (ms)", self.mrt_ms);
        let _ = writeln!(s, "{:<16} {:>10}", "queries", self.per_query.len());
        s
    }

    /// Aggregate rows then one row per query (`-` for excluded metrics).
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("scope\tmrr_at_10\tndcg_at_10\trecall_at_1000\tmrt_ms\n");
        let _ = writeln!(
            s,
            "all\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.mrr_at_10, self.ndcg_at_10, self.recall_at_1000, self.mrt_ms
        );
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        for (q, m) in &self.per_query {
            let _ = writeln!(s, "{q}\t{:.6}\t{}\t{}\t-", m.mrr, opt(m.ndcg), opt(m.recall));
        }
        s
    }
}

/// Mean single-threaded retrieval time per query in milliseconds. One
/// warm-up pass is run and discarded.
pub fn measure_mrt(queries: &[EncodedQuery], index: &EncodedIndex, depth: usize, repetitions: usize) -> Result<f64> {
    if repetitions == 0 {
        return Err(Error::invalid("repetitions must be at least 1"));
    }
    if queries.is_empty() {
        return Ok(0.0);
    }
    for q in queries {
        std::hint::black_box(retrieve_sequential(q, index, depth)?);
    }
    let start = Instant::now();
    for _ in 0..repetitions {
        for q in queries {
            std::hint::black_box(retrieve_sequential(q, index, depth)?);
        }
    }
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    Ok(elapsed / (repetitions * queries.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub cutoff: u8,
    /// Ascending threshold.
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("threshold\tprecision\trecall\n");
        for p in &self.points {
            let _ = writeln!(s, "{}\t{}\t{}", p.threshold, p.precision, p.recall);
        }
        s
    }
}

/// Precision and recall of `{score >= t}` against `{grade >= cutoff}` at
/// every distinct score `t`.
pub fn pr_curve_from_pairs(pairs: &[(f64, u8)], cutoff: u8) -> Result<PrCurve> {
    if !(1..=MAX_GRADE).contains(&cutoff) {
        return Err(Error::invalid(format!("cutoff {cutoff} outside 1..={MAX_GRADE}")));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no judged passages"));
    }
    if pairs.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::invalid("non-finite score"));
    }
    let total_pos = pairs.iter().filter(|(_, g)| *g >= cutoff).count();
    if total_pos == 0 {
        return Err(Error::invalid(format!("no passages graded >= {cutoff}")));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut taken) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            taken += 1;
            if sorted[i].1 >= cutoff {
                tp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: t,
            precision: tp as f64 / taken as f64,
            recall: tp as f64 / total_pos as f64,
        });
    }
    points.reverse();
    Ok(PrCurve { cutoff, points })
}

/// PR curve over judged `(query, passage, score)` triples; unjudged
/// passages are ignored.
pub fn pr_curve(scores: &[(QueryId, PassageId, f64)], qrels: &Qrels, cutoff: u8) -> Result<PrCurve> {
    let pairs: Vec<(f64, u8)> = scores
        .iter()
        .filter_map(|(q, p, s)| qrels.judged(*q).and_then(|m| m.get(p)).map(|g| (*s, *g)))
        .collect();
    pr_curve_from_pairs(&pairs, cutoff)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    FeedbackPassages,
    Clusters,
    Expansions,
    Beta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::FeedbackPassages => "f_p",
            SweepParam::Clusters => "f_c",
            SweepParam::Expansions => "f_e",
            SweepParam::Beta => "beta",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub f_p: Vec<usize>,
    pub f_c: Vec<usize>,
    pub f_e: Vec<usize>,
    pub beta: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            f_p: vec![1, 3, 5],
            f_c: vec![12, 24],
            f_e: vec![5, 10],
            beta: vec![0.5, 1.0],
        }
    }
}

/// The default configuration followed by every single-parameter variant;
/// variants with `f_e > f_c` are dropped with a warning.
pub fn sweep_configs(defaults: &PrfConfig, grid: &SweepGrid) -> Vec<(Option<SweepParam>, PrfConfig)> {
    let mut out = vec![(None, *defaults)];
    let mut push = |param: SweepParam, cfg: PrfConfig| match cfg.validate() {
        Ok(()) => out.push((Some(param), cfg)),
        Err(e) => log::warn!("skipping sweep row {}: {e}", param.name()),
    };
    for &v in grid.f_p.iter().filter(|&&v| v != defaults.f_p) {
        push(SweepParam::FeedbackPassages, PrfConfig { f_p: v, ..*defaults });
    }
    for &v in grid.f_c.iter().filter(|&&v| v != defaults.f_c) {
        push(SweepParam::Clusters, PrfConfig { f_c: v, ..*defaults });
    }
    for &v in grid.f_e.iter().filter(|&&v| v != defaults.f_e) {
        push(SweepParam::Expansions, PrfConfig { f_e: v, ..*defaults });
    }
    for &v in grid.beta.iter().filter(|&&v| v != defaults.beta) {
        push(SweepParam::Beta, PrfConfig { beta: v, ..*defaults });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub varied: Option<SweepParam>,
    pub config: PrfConfig,
    pub ndcg_at_10: f64,
    pub recall_at_1k: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("varied\tf_p\tf_c\tf_e\tbeta\tndcg_at_10\trecall_at_1k\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
                r.varied.map_or("default", SweepParam::name),
                r.config.f_p,
                r.config.f_c,
                r.config.f_e,
                r.config.beta,
                r.ndcg_at_10,
                r.recall_at_1k
            );
        }
        s
    }
}

/// Read-only inputs for evaluating teacher configurations.
pub struct SweepEvalSet<'a> {
    pub index: &'a EncodedIndex,
    pub idf: &'a IdfTable,
    /// Queries encoded with the pre-trained projection.
    pub queries: &'a [EncodedQuery],
    pub qrels: &'a Qrels,
    pub depth: usize,
    pub seed: u64,
    pub binary_cutoff: u8,
}

/// Teacher ranking for one query: first-stage retrieval re-scored with the
/// PRF-augmented score.
pub fn teacher_ranking(
    query: &EncodedQuery,
    first_stage: &Ranking,
    index: &EncodedIndex,
    idf: &IdfTable,
    cfg: &PrfConfig,
    seed: u64,
) -> Result<Ranking> {
    let set = extract_centroids(
        query.query_id,
        first_stage,
        index,
        cfg,
        derive_seed(seed, query.query_id.0, 0xC1),
    )?;
    let cc = select_by_idf(&set, index, idf, cfg.f_e)?;
    teacher_rerank(query, first_stage, index, &cc, cfg.beta)
}

pub fn sweep(defaults: &PrfConfig, grid: &SweepGrid, eval: &SweepEvalSet<'_>) -> Result<SweepResult> {
    if eval.queries.is_empty() {
        return Err(Error::EmptyInput);
    }
    let first_stage = eval
        .queries
        .iter()
        .map(|q| retrieve(q, eval.index, eval.depth))
        .collect::<Result<Vec<_>>>()?;
    let cfg = EvalConfig {
        binary_cutoff: eval.binary_cutoff,
        ..EvalConfig::default()
    };
    let mut rows = Vec::new();
    for (varied, prf) in sweep_configs(defaults, grid) {
        let rankings = eval
            .queries
            .iter()
            .zip(&first_stage)
            .map(|(q, r)| teacher_ranking(q, r, eval.index, eval.idf, &prf, eval.seed))
            .collect::<Result<Vec<_>>>()?;
        let report = evaluate(&rankings, eval.qrels, &cfg, 0.0)?;
        rows.push(SweepRow {
            varied,
            config: prf,
            ndcg_at_10: report.ndcg_at_10,
            recall_at_1k: report.recall_at_1000,
        });
    }
    Ok(SweepResult { rows })
}
