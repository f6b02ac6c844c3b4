use crank::embeddings::RawEmbeddingMatrix;
use crank::linalg::Matrix;
use crank::relevance::{
    grad_hard_loss, grad_kd_loss, student_distribution, LossGrad, Projection, RelevanceDistribution,
};
use crank::PassageId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-4;

fn raw(rng: &mut ChaCha8Rng, tokens: usize, dim: usize) -> RawEmbeddingMatrix {
    let v = (0..tokens * dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    RawEmbeddingMatrix::new(tokens, dim, v).unwrap()
}

fn instance(seed: u64, n: usize) -> (Projection, RawEmbeddingMatrix, Vec<RawEmbeddingMatrix>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = raw(&mut rng, 3, 8);
    let cands = (0..n).map(|_| raw(&mut rng, 3, 8)).collect();
    (Projection::random(4, 8, seed + 77), q, cands)
}

fn with_weights(w: &Matrix) -> Projection {
    Projection::new(w.clone()).unwrap()
}

/// Central differences of `f` around `w`, one coordinate at a time.
fn numeric(w: &Matrix, f: impl Fn(&Projection) -> f64) -> Vec<f64> {
    (0..w.as_slice().len())
        .map(|i| {
            let mut plus = w.clone();
            plus.as_mut_slice()[i] += H;
            let mut minus = w.clone();
            minus.as_mut_slice()[i] -= H;
            (f(&with_weights(&plus)) - f(&with_weights(&minus))) / (2.0 * H)
        })
        .collect()
}

/// Worst coordinate-wise relative error with a small absolute floor.
fn coordinate_error(g: &LossGrad, num: &[f64]) -> f64 {
    g.gradient
        .as_slice()
        .iter()
        .zip(num)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn soft_target(n: usize, seed: u64) -> RelevanceDistribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.1).collect();
    let s: f64 = raw.iter().sum();
    RelevanceDistribution::new(
        (0..n as u64).map(PassageId).collect(),
        raw.iter().map(|x| x / s).collect(),
    )
    .unwrap()
}

#[test]
fn kd_gradient_small_instance_all_coordinates() {
    for seed in 0..5 {
        let (proj, q, cands) = instance(seed, 2);
        let refs: Vec<_> = cands.iter().collect();
        let t = soft_target(2, seed);
        let g = grad_kd_loss(&proj, &q, &refs, &t).unwrap();
        let num = numeric(proj.weights(), |p| grad_kd_loss(p, &q, &refs, &t).unwrap().loss);
        let err = coordinate_error(&g, &num);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn kd_gradient_at_rescaled_weights() {
    let (proj, q, cands) = instance(3, 3);
    let refs: Vec<_> = cands.iter().collect();
    let t = soft_target(3, 3);
    let mut w2 = proj.weights().clone();
    w2.scale(2.0);
    let doubled = with_weights(&w2);
    let g = grad_kd_loss(&doubled, &q, &refs, &t).unwrap();
    let num = numeric(doubled.weights(), |p| grad_kd_loss(p, &q, &refs, &t).unwrap().loss);
    assert!(coordinate_error(&g, &num) < 1e-4);
}

#[test]
fn hard_gradient_matches_differences() {
    for seed in 10..15 {
        let (proj, q, cands) = instance(seed, 4);
        let negs: Vec<_> = cands[1..].iter().collect();
        let g = grad_hard_loss(&proj, &q, &cands[0], &negs).unwrap();
        let num = numeric(proj.weights(), |p| {
            grad_hard_loss(p, &q, &cands[0], &negs).unwrap().loss
        });
        assert!(coordinate_error(&g, &num) < 1e-4, "seed {seed}");
    }
}

#[test]
fn hard_loss_is_kd_with_one_hot_target() {
    let (proj, q, cands) = instance(21, 3);
    let refs: Vec<_> = cands.iter().collect();
    let one_hot =
        RelevanceDistribution::new(vec![PassageId(0), PassageId(1), PassageId(2)], vec![1.0, 0.0, 0.0]).unwrap();
    let kd = grad_kd_loss(&proj, &q, &refs, &one_hot).unwrap();
    let hard = grad_hard_loss(&proj, &q, &cands[0], &refs[1..]).unwrap();
    assert!((kd.loss - hard.loss).abs() < 1e-9);
    for (a, b) in kd.gradient.as_slice().iter().zip(hard.gradient.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn kd_is_stationary_at_own_distribution() {
    let (proj, q, cands) = instance(5, 4);
    let pairs: Vec<_> = cands
        .iter()
        .enumerate()
        .map(|(i, m)| (PassageId(i as u64), m))
        .collect();
    let own = student_distribution(&proj, &q, &pairs).unwrap();
    let refs: Vec<_> = cands.iter().collect();
    let g = grad_kd_loss(&proj, &q, &refs, &own).unwrap();
    assert!(g.loss.abs() < 1e-12);
    assert!(g.gradient.as_slice().iter().all(|x| x.abs() < 1e-8));
    let num = numeric(proj.weights(), |p| grad_kd_loss(p, &q, &refs, &own).unwrap().loss);
    assert!(num.iter().all(|x| x.abs() < 1e-6));
}

#[test]
fn single_candidate_has_no_gradient() {
    let (proj, q, cands) = instance(8, 1);
    let g = grad_hard_loss(&proj, &q, &cands[0], &[]).unwrap();
    assert_eq!(g.loss, 0.0);
    assert!(g.gradient.as_slice().iter().all(|x| *x == 0.0));
}
