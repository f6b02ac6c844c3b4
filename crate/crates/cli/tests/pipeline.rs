use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crank::embeddings::tsv::read_text_records;
use crank::embeddings::{
    read_embedding_file, EmbeddingProvider, EmbeddingProviderConfig, EncodeKind, EncodingCounter, Vocabulary,
};
use crank::index::Corpus;

fn crank(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crank"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = crank(dir, args);
    assert!(
        out.status.success(),
        "crank {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    crank(dir, args).status.code().expect("exit code")
}

/// A small synthetic workspace with the index already built.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "gen-synthetic",
            "--out",
            "data",
            "--queries",
            "12",
            "--fillers",
            "30",
            "--seed",
            "3",
        ],
    );
    ok(dir.path(), &["-c", "data/crank.toml", "index"]);
    dir
}

fn run_rows(path: &Path) -> Vec<(u64, u64, usize, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(' ').collect();
            assert_eq!(f.len(), 6, "{l}");
            assert_eq!(f[1], "Q0");
            (
                f[0].parse().unwrap(),
                f[2].parse().unwrap(),
                f[3].parse().unwrap(),
                f[4].parse().unwrap(),
            )
        })
        .collect()
}

/// Value of `column` in the `all` row of a metrics report.
fn tsv_value(report: &str, column: &str) -> f64 {
    let mut lines = report.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let col = header
        .iter()
        .position(|h| *h == column)
        .unwrap_or_else(|| panic!("{column} missing"));
    let all = lines.find(|l| l.starts_with("all\t")).expect("aggregate row");
    all.split('\t').nth(col).unwrap().parse().unwrap()
}

#[test]
fn stages_compose_end_to_end() {
    let dir = workspace();
    let d = dir.path();
    let w = d.join("data/work");

    ok(d, &["-c", "data/crank.toml", "rank", "--tag", "theta", "--depth", "50"]);
    let rows = run_rows(&w.join("runs/theta.run"));
    let mut per_query: HashMap<u64, Vec<(usize, f64)>> = HashMap::new();
    for (q, _, r, s) in rows {
        per_query.entry(q).or_default().push((r, s));
    }
    assert_eq!(per_query.len(), 12);
    for ranks in per_query.values() {
        assert!(ranks.len() <= 50);
        assert!(ranks.windows(2).all(|p| p[0].1 >= p[1].1 && p[1].0 == p[0].0 + 1));
    }

    let out = ok(d, &["-c", "data/crank.toml", "annotate"]);
    assert!(out.contains("annotated\t12"), "{out}");
    assert!(out.contains("passage_encodings\t0"), "{out}");
    let mut sums: HashMap<&str, f64> = HashMap::new();
    let labels = fs::read_to_string(w.join("labels.tsv")).unwrap();
    for line in labels.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 5, "{line}");
        *sums.entry(f[0]).or_default() += f[3].parse::<f64>().unwrap();
    }
    assert_eq!(sums.len(), 12);
    assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-9), "{sums:?}");

    ok(d, &["-c", "data/crank.toml", "--set", "train.epochs=4", "distill"]);
    let loss = fs::read_to_string(w.join("student.loss.tsv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 4);

    ok(
        d,
        &[
            "-c",
            "data/crank.toml",
            "rank",
            "--checkpoint",
            "data/work/student.crwt",
            "--tag",
            "student",
        ],
    );
    ok(
        d,
        &[
            "-c",
            "data/crank.toml",
            "eval",
            "--run",
            "data/work/runs/student.run",
            "--pr-curve",
            "pr.tsv",
        ],
    );
    let report = fs::read_to_string(w.join("reports/student.metrics.tsv")).unwrap();
    let mrr = tsv_value(&report, "mrr_at_10");
    assert!((0.0..=1.0).contains(&mrr));
    assert!(fs::read_to_string(d.join("pr.tsv")).unwrap().lines().count() > 1);

    // Every artifact carries provenance.
    for f in [
        "index/passages.crnk",
        "runs/student.run",
        "labels.tsv",
        "student.crwt",
        "reports/student.metrics.tsv",
    ] {
        let meta = fs::read_to_string(w.join(format!("{f}.meta"))).unwrap();
        assert!(meta.contains("config_hash = "), "{f}");
        assert!(meta.contains("[seeds]"), "{f}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = workspace();
    let d = dir.path();
    let idx = d.join("data/work/index");
    let snapshot = |names: &[&str]| names.iter().map(|n| fs::read(idx.join(n)).unwrap()).collect::<Vec<_>>();
    let files = [
        "passages.crnk",
        "static_tokens.crnk",
        "idf.tsv",
        "vocab.tsv",
        "theta.crwt",
    ];
    let before = snapshot(&files);
    ok(d, &["-c", "data/crank.toml", "index"]);
    assert_eq!(before, snapshot(&files));

    ok(d, &["-c", "data/crank.toml", "annotate", "--out", "a.tsv"]);
    ok(d, &["-c", "data/crank.toml", "annotate", "--out", "b.tsv"]);
    assert_eq!(fs::read(d.join("a.tsv")).unwrap(), fs::read(d.join("b.tsv")).unwrap());
}

#[test]
fn run_scores_match_offline_rescoring() {
    let dir = workspace();
    let d = dir.path();
    ok(
        d,
        &[
            "-c",
            "data/crank.toml",
            "rank",
            "--depth",
            "5",
            "--query",
            "0",
            "--query",
            "1",
        ],
    );
    let rows = run_rows(&d.join("data/work/runs/crank.run"));
    assert_eq!(rows.len(), 10);

    let (_, stored) = read_embedding_file(d.join("data/work/index/passages.crnk")).unwrap();
    let passages: HashMap<u64, Vec<Vec<f64>>> = stored
        .into_iter()
        .map(|(id, m)| {
            let rows = (0..m.token_count())
                .map(|i| {
                    let r: Vec<f64> = m.row(i).iter().map(|&v| f64::from(v)).collect();
                    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    r.into_iter().map(|v| v / n).collect()
                })
                .collect();
            (id, rows)
        })
        .collect();

    let mut vocab = Vocabulary::new();
    let records = read_text_records(d.join("data/passages.tsv")).unwrap();
    Corpus::from_records(&records, &mut vocab).unwrap();
    let queries = read_text_records(d.join("data/queries.tsv")).unwrap();
    let theta = crank::distill::read_checkpoint(d.join("data/work/index/theta.crwt")).unwrap();
    let provider = EmbeddingProvider::new(EmbeddingProviderConfig::hashed(32, 3, 2)).unwrap();
    let counter = EncodingCounter::new();
    let mut encoded = HashMap::new();
    for q in &queries {
        let toks = vocab.tokenize(&q.text);
        let raw = provider.encode_raw(q.id, &toks, EncodeKind::Query, &counter).unwrap();
        encoded.insert(q.id, theta.project(q.id, &raw).unwrap());
    }

    for (q, p, _, score) in rows {
        let qm = &encoded[&q];
        let expect: f64 = qm
            .iter_rows()
            .map(|qr| {
                passages[&p]
                    .iter()
                    .map(|pr| qr.iter().zip(pr).map(|(a, b)| a * b).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum();
        assert!((expect - score).abs() <= 5e-7 + 1e-9, "q{q} p{p}: {expect} vs {score}");
    }
}

#[test]
fn zero_learning_rate_returns_theta() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["-c", "data/crank.toml", "annotate"]);
    ok(
        d,
        &[
            "-c",
            "data/crank.toml",
            "--set",
            "train.learning_rate=0",
            "--set",
            "train.epochs=2",
            "distill",
            "--out",
            "s.crwt",
        ],
    );
    assert_eq!(
        fs::read(d.join("s.crwt")).unwrap(),
        fs::read(d.join("data/work/index/theta.crwt")).unwrap()
    );
}

#[test]
fn random_negatives_source_trains() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["-c", "data/crank.toml", "annotate"]);
    let out = ok(
        d,
        &[
            "-c",
            "data/crank.toml",
            "--set",
            "train.negatives_source=bm25_like_random",
            "--set",
            "train.epochs=2",
            "distill",
        ],
    );
    assert!(out.contains("epochs\t2"), "{out}");
}

#[test]
fn sweep_emits_one_row_per_variant() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["-c", "data/crank.toml", "--set", "retrieval.depth=100", "sweep"]);
    let tsv = fs::read_to_string(d.join("data/work/reports/sweep.tsv")).unwrap();
    // Header, the default, then 2 + 1 + 1 + 1 off-default variants.
    assert_eq!(tsv.lines().count(), 1 + 6, "{tsv}");
}

fn write_perfect_case(d: &Path) -> (PathBuf, PathBuf) {
    let run = d.join("perfect.run");
    let qrels = d.join("qrels.txt");
    fs::write(
        &run,
        "1 Q0 10 1 3.000000 t\n1 Q0 11 2 2.000000 t\n2 Q0 20 1 5.000000 t\n2 Q0 21 2 1.000000 t\n",
    )
    .unwrap();
    fs::write(&qrels, "1 0 10 3\n1 0 11 0\n2 0 20 2\n").unwrap();
    (run, qrels)
}

#[test]
fn eval_of_perfect_run_scores_one_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_perfect_case(d);
    ok(
        d,
        &["eval", "--run", "perfect.run", "--qrels", "qrels.txt", "--out", "a.tsv"],
    );
    ok(
        d,
        &["eval", "--run", "perfect.run", "--qrels", "qrels.txt", "--out", "b.tsv"],
    );
    let a = fs::read_to_string(d.join("a.tsv")).unwrap();
    assert_eq!(tsv_value(&a, "mrr_at_10"), 1.0);
    assert_eq!(a, fs::read_to_string(d.join("b.tsv")).unwrap());
}

#[test]
fn validation_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["-c", "missing.toml", "index"]), 1);
    // Missing corpus: rejected before the work directory is created.
    fs::write(d.join("c.toml"), "[paths]\npassages = \"nope.tsv\"\n").unwrap();
    assert_eq!(code(d, &["-c", "c.toml", "index"]), 1);
    assert!(!d.join("work").exists());
    assert_eq!(code(d, &["-c", "c.toml", "--set", "prf.f_e=50", "index"]), 1);
    assert_eq!(code(d, &["-c", "c.toml", "--set", "paths.bogus=1", "index"]), 1);
    assert_eq!(code(d, &["no-such-command"]), 1);

    // Run and qrels with no query in common.
    write_perfect_case(d);
    fs::write(d.join("other.txt"), "9 0 10 3\n").unwrap();
    assert_eq!(code(d, &["eval", "--run", "perfect.run", "--qrels", "other.txt"]), 1);
    // Malformed run line.
    fs::write(d.join("bad.run"), "1 Q0 10\n").unwrap();
    assert_eq!(code(d, &["eval", "--run", "bad.run", "--qrels", "qrels.txt"]), 1);
}

#[test]
fn unknown_query_filter_is_rejected() {
    let dir = workspace();
    assert_eq!(
        code(dir.path(), &["-c", "data/crank.toml", "rank", "--query", "424242"]),
        1
    );
}

#[test]
fn checkpoint_dimension_mismatch_is_a_runtime_error() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["-c", "data/crank.toml", "annotate"]);
    // A projection for 8-dimensional inputs cannot consume 32-dimensional embeddings.
    crank::distill::write_checkpoint(&crank::relevance::Projection::random(16, 8, 1), d.join("w8.crwt")).unwrap();
    let args = [
        "-c",
        "data/crank.toml",
        "--set",
        "projection.checkpoint=\"../w8.crwt\"",
        "distill",
    ];
    assert_eq!(code(d, &args), 2);
}
