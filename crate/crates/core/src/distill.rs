//! Student training against teacher label sets.
//!
//! The student starts as a copy of the pre-trained projection and is updated
//! by plain per-query gradient descent, visiting queries in a seeded shuffled
//! order each epoch.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::collective::{sample_from_ranking, TeacherLabelSet};
use crate::embeddings::RawEmbeddingMatrix;
use crate::error::{Error, Result};
use crate::ids::{PassageId, QueryId};
use crate::index::Ranking;
use crate::linalg::Matrix;
use crate::relevance::{
    grad_hard_loss, grad_kd_loss, kl_divergence, student_distribution, LossGrad, ParameterSnapshot, Projection,
    RelevanceDistribution,
};
use crate::seed::derive_seed;

/// Pool depth for `bm25_like_random` negatives.
pub const RANDOM_NEGATIVE_POOL: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// KL divergence to the teacher target distribution.
    KdKl,
    /// Cross-entropy with the observed positive as the only relevant item.
    HardCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativesSource {
    /// Uniform sample from the top-1000 of the pre-trained ranking.
    Bm25LikeRandom,
    /// Uniform sample from the top-100 of the pre-trained ranking.
    Top100Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub objective: Objective,
    pub negatives_source: NegativesSource,
    /// Frobenius-norm clip applied to each per-query gradient.
    pub gradient_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 20,
            seed: 0,
            objective: Objective::KdKl,
            negatives_source: NegativesSource::Top100Hard,
            gradient_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if let Some(c) = self.gradient_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::invalid("gradient_clip must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub projection: Projection,
    pub steps: usize,
}

/// Raw embeddings needed to recompute student scores.
pub trait RawLookup {
    fn query(&self, id: QueryId) -> Option<&RawEmbeddingMatrix>;
    fn passage(&self, id: PassageId) -> Option<&RawEmbeddingMatrix>;
}

#[derive(Debug, Clone, Default)]
pub struct RawStore {
    pub queries: BTreeMap<QueryId, RawEmbeddingMatrix>,
    pub passages: BTreeMap<PassageId, RawEmbeddingMatrix>,
}

impl RawLookup for RawStore {
    fn query(&self, id: QueryId) -> Option<&RawEmbeddingMatrix> {
        self.queries.get(&id)
    }

    fn passage(&self, id: PassageId) -> Option<&RawEmbeddingMatrix> {
        self.passages.get(&id)
    }
}

pub fn init_student(snapshot: &ParameterSnapshot) -> Projection {
    snapshot.projection().clone()
}

struct Resolved<'a> {
    query: &'a RawEmbeddingMatrix,
    candidates: Vec<&'a RawEmbeddingMatrix>,
    positive: usize,
}

fn resolve<'a>(set: &TeacherLabelSet, raw: &'a impl RawLookup) -> Result<Resolved<'a>> {
    let query = raw.query(set.query_id).ok_or(Error::UnknownQuery(set.query_id.0))?;
    let candidates = set
        .candidates
        .iter()
        .map(|p| raw.passage(*p).ok_or(Error::UnknownPassage(p.0)))
        .collect::<Result<Vec<_>>>()?;
    let positive = set
        .candidates
        .iter()
        .position(|&c| c == set.observed_positive)
        .ok_or(Error::CandidateMismatch)?;
    Ok(Resolved {
        query,
        candidates,
        positive,
    })
}

fn example_loss_grad(
    projection: &Projection,
    set: &TeacherLabelSet,
    r: &Resolved<'_>,
    objective: Objective,
) -> Result<LossGrad> {
    match objective {
        Objective::KdKl => grad_kd_loss(projection, r.query, &r.candidates, &set.target),
        Objective::HardCe => {
            let negatives: Vec<&RawEmbeddingMatrix> = r
                .candidates
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != r.positive)
                .map(|(_, m)| *m)
                .collect();
            grad_hard_loss(projection, r.query, r.candidates[r.positive], &negatives)
        }
    }
}

pub fn train_student(
    labels: &[TeacherLabelSet],
    raw: &impl RawLookup,
    init: &Projection,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let resolved = labels.iter().map(|s| resolve(s, raw)).collect::<Result<Vec<_>>>()?;

    let mut projection = init.clone();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 0x5E));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let LossGrad { loss, mut gradient } =
                example_loss_grad(&projection, &labels[i], &resolved[i], cfg.objective)?;
            total += loss;
            if let Some(clip) = cfg.gradient_clip {
                let norm = gradient.frobenius_norm();
                if norm > clip {
                    gradient.scale(clip / norm);
                }
            }
            if cfg.learning_rate > 0.0 {
                projection.weights_mut().add_scaled(&gradient, -cfg.learning_rate);
            }
            steps += 1;
        }
        let mean = total / labels.len() as f64;
        log::debug!("epoch {} mean loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    Projection::new(projection.weights().clone())?;
    Ok(TrainReport {
        epoch_losses,
        projection,
        steps,
    })
}

/// Loss and gradient the trainer would use for one label set.
pub fn example_gradient(
    projection: &Projection,
    set: &TeacherLabelSet,
    raw: &impl RawLookup,
    objective: Objective,
) -> Result<LossGrad> {
    let r = resolve(set, raw)?;
    example_loss_grad(projection, set, &r, objective)
}

/// Student distribution over a label set's candidates.
pub fn student_distribution_for(
    projection: &Projection,
    set: &TeacherLabelSet,
    raw: &impl RawLookup,
) -> Result<RelevanceDistribution> {
    let r = resolve(set, raw)?;
    let cands: Vec<(PassageId, &RawEmbeddingMatrix)> = set.candidates.iter().copied().zip(r.candidates).collect();
    student_distribution(projection, r.query, &cands)
}

/// KL(teacher || student); what distillation drives toward zero.
pub fn residual_gap(teacher_target: &RelevanceDistribution, student_dist: &RelevanceDistribution) -> Result<f64> {
    kl_divergence(teacher_target, student_dist)
}

/// Replaces each label set's negatives with a uniform sample of `count`
/// passages from the top-1000 of the matching pre-trained ranking; the
/// target becomes one-hot on the observed positive.
pub fn with_random_negatives(
    labels: &[TeacherLabelSet],
    rankings: &HashMap<QueryId, Ranking>,
    count: usize,
    seed: u64,
) -> Result<Vec<TeacherLabelSet>> {
    labels
        .iter()
        .map(|set| {
            let ranking = rankings.get(&set.query_id).ok_or(Error::UnknownQuery(set.query_id.0))?;
            let positives: HashSet<PassageId> = [set.observed_positive].into();
            let negatives = sample_from_ranking(
                ranking,
                &positives,
                count,
                RANDOM_NEGATIVE_POOL,
                derive_seed(seed, set.query_id.0, 0xB2),
            )?;
            let mut candidates = vec![set.observed_positive];
            candidates.extend(negatives);
            let mut probs = vec![0.0; candidates.len()];
            probs[0] = 1.0;
            Ok(TeacherLabelSet {
                query_id: set.query_id,
                teacher_scores: vec![0.0; candidates.len()],
                target: RelevanceDistribution::new(candidates.clone(), probs)?,
                candidates,
                observed_positive: set.observed_positive,
            })
        })
        .collect()
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CRWT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `CRWT`, version, dim_out, dim_in, then `dim_out * dim_in` f32 row-major.
pub fn encode_checkpoint(projection: &Projection) -> Vec<u8> {
    let w = projection.weights();
    let mut out = Vec::with_capacity(16 + 4 * w.as_slice().len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(projection.dim_out() as u32).to_le_bytes());
    out.extend_from_slice(&(projection.dim_in() as u32).to_le_bytes());
    for &v in w.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Projection> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            offset: bytes.len(),
            needed: 16 - bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (dim_out, dim_in) = (word(8) as usize, word(12) as usize);
    let expected = 16 + 4 * dim_out * dim_in;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            offset: bytes.len(),
            needed: expected - bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::invalid(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - expected
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Projection::new(Matrix::from_vec(dim_out, dim_in, data))
}

pub fn write_checkpoint(projection: &Projection, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(projection)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Projection> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_of_f32_weights() {
        let p = Projection::random(4, 6, 3);
        let back = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn checkpoint_rejects_bad_input() {
        let p = Projection::random(2, 2, 3);
        let mut bytes = encode_checkpoint(&p);
        bytes.pop();
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Truncated { .. })));
        let mut bytes = encode_checkpoint(&p);
        bytes[3] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn students_are_independent_copies() {
        let theta = Projection::random(3, 5, 1);
        let snap = ParameterSnapshot::new(&theta, "pretrained-theta");
        let mut a = init_student(&snap);
        let b = init_student(&snap);
        assert_eq!(a, theta);
        a.weights_mut().scale(0.5);
        assert_eq!(b, theta);
        assert_eq!(snap.projection(), &theta);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: f64::NAN,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            gradient_clip: Some(0.0),
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
