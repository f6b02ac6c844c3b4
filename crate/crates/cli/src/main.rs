//! `crank`: index, label, distill and evaluate a late-interaction retriever.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::commands::{EvalArgs, RankArgs, SyntheticArgs};
use crate::config::PipelineConfig;

/// A problem with the user's inputs rather than with the computation.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct Invalid(pub String);

#[derive(Debug, Parser)]
#[command(name = "crank", version, about)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set prf.beta=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode and persist the passage index, IDF table and static token vectors.
    Index,
    /// Rank passages for each query and write a TREC run file.
    Rank {
        /// Projection to rank with; the corpus is re-encoded with it.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, default_value = "crank")]
        tag: String,
        /// Restrict to these query ids. Repeatable.
        #[arg(long = "query", value_name = "ID")]
        queries: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write teacher label sets for the training queries.
    Annotate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the student projection from teacher labels.
    Distill {
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a run file against graded judgments.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: Option<PathBuf>,
        /// Minimum grade counted as relevant for MRR and recall.
        #[arg(long)]
        cutoff: Option<u8>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a precision-recall curve over the run's scores.
        #[arg(long)]
        pr_curve: Option<PathBuf>,
    },
    /// Vary one teacher hyperparameter at a time and report NDCG and recall.
    Sweep {
        #[arg(long)]
        qrels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the bundled synthetic dataset and a matching config.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        fillers: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::GenSynthetic {
        out,
        queries,
        fillers,
        seed,
    } = cli.command
    {
        return commands::gen_synthetic(SyntheticArgs {
            out,
            queries,
            fillers,
            seed,
        });
    }

    let mut overrides = cli.overrides;
    if let Some(t) = cli.threads {
        overrides.push(format!("threads={t}"));
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
    }

    match cli.command {
        Command::Index => commands::index(&cfg),
        Command::Rank {
            checkpoint,
            depth,
            tag,
            queries,
            out,
        } => commands::rank(
            &cfg,
            RankArgs {
                checkpoint,
                depth,
                tag,
                queries,
                out,
            },
        )
        .map(drop),
        Command::Annotate { out } => commands::annotate(&cfg, out).map(drop),
        Command::Distill { labels, out } => commands::distill(&cfg, labels, out).map(drop),
        Command::Eval {
            run,
            qrels,
            cutoff,
            out,
            pr_curve,
        } => commands::eval(
            &cfg,
            EvalArgs {
                run,
                qrels,
                cutoff,
                out,
                pr_curve,
            },
        )
        .map(drop),
        Command::Sweep { qrels, out } => commands::sweep_cmd(&cfg, qrels, out).map(drop),
        Command::GenSynthetic { .. } => unreachable!("handled above"),
    }
}

/// Exit code for a failure: 1 for bad inputs, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<crank::Error>() {
            return match e {
                crank::Error::Parse { .. } | crank::Error::InvalidArgument(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
