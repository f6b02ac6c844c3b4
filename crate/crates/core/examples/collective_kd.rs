//! Compares collective KD against hard-CE and self-KD on the synthetic task.
//!
//! Knobs via env: DIM_IN, DIM_OUT, LR, EPOCHS, NEG, SEEDS.

use std::env;

use crank::collective::{PrfConfig, TeacherLabelSet};
use crank::distill::{train_student, Objective, TrainConfig};
use crank::synthetic::{generate, SyntheticConfig, Workbench};

fn var<T: std::str::FromStr>(k: &str, d: T) -> T {
    env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() -> crank::Result<()> {
    let dim_in = var("DIM_IN", 32);
    let dim_out = var("DIM_OUT", 16);
    let lr = var("LR", 0.05);
    let epochs = var("EPOCHS", 20);
    let neg = var("NEG", 32);
    let seeds: u64 = var("SEEDS", 5);
    for seed in 0..seeds {
        let ds = generate(&SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        })?;
        let wb = Workbench::new(ds, dim_in, dim_out, seed)?;
        let annotate = |beta: f64| -> crank::Result<Vec<TeacherLabelSet>> {
            let a = wb.annotator(
                PrfConfig {
                    beta,
                    ..PrfConfig::default()
                },
                neg,
                seed,
            );
            Ok(a.annotate_all(&wb.queries)?.into_iter().map(|x| x.labels).collect())
        };
        let collective = annotate(1.0)?;
        let self_kd = annotate(0.0)?;
        let cfg = |objective| TrainConfig {
            learning_rate: lr,
            epochs,
            seed,
            objective,
            ..TrainConfig::default()
        };
        let c = train_student(&collective, &wb.raw, &wb.theta, &cfg(Objective::KdKl))?;
        let h = train_student(&collective, &wb.raw, &wb.theta, &cfg(Objective::HardCe))?;
        let s = train_student(&self_kd, &wb.raw, &wb.theta, &cfg(Objective::KdKl))?;
        println!(
            "seed {seed}: R@10 of unlabeled positives  theta {:.3}  collective {:.3}  hard-ce {:.3}  self-kd {:.3}",
            wb.unlabeled_recall(&wb.theta, 10)?,
            wb.unlabeled_recall(&c.projection, 10)?,
            wb.unlabeled_recall(&h.projection, 10)?,
            wb.unlabeled_recall(&s.projection, 10)?,
        );
    }
    Ok(())
}
