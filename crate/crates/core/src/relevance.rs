//! Late-interaction scoring and the losses built on it.
//!
//! Token rows are projected by `W` and L2-normalized, so every MaxSim term
//! is a cosine in `[-1, 1]` and a query of `|q|` tokens scores at most `|q|`.
//! `W` is the only trainable parameter; [`grad_kd_loss`] and
//! [`grad_hard_loss`] backpropagate through softmax, the max (at its
//! designated argmax), the row normalization and the projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embeddings::RawEmbeddingMatrix;
use crate::error::{check_finite, Error, Result};
use crate::ids::{PassageId, QueryId};
use crate::linalg::{dot, Matrix};

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Linear map `W` of shape `dim_out x dim_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    weights: Matrix,
}

impl Projection {
    pub fn new(weights: Matrix) -> Result<Self> {
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::invalid("projection dims must be positive"));
        }
        for &v in weights.as_slice() {
            check_finite(v, "projection weight")?;
        }
        Ok(Self { weights })
    }

    /// Gaussian entries with variance `1 / dim_in`, rounded to `f32` so the
    /// projection survives a checkpoint round trip unchanged.
    pub fn random(dim_out: usize, dim_in: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim_in as f64).sqrt();
        let data = (0..dim_out * dim_in)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32 as f64
            })
            .collect();
        Self {
            weights: Matrix::from_vec(dim_out, dim_in, data),
        }
    }

    pub fn dim_out(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    /// Projects every raw row and normalizes it to unit length.
    pub fn project(&self, id: u64, raw: &RawEmbeddingMatrix) -> Result<Matrix> {
        Ok(self.project_with_norms(id, raw)?.0)
    }

    fn project_with_norms(&self, id: u64, raw: &RawEmbeddingMatrix) -> Result<(Matrix, Vec<f64>)> {
        if raw.dim_in() != self.dim_in() {
            return Err(Error::DimensionMismatch {
                expected: self.dim_in(),
                actual: raw.dim_in(),
            });
        }
        let mut out = Matrix::zeros(raw.token_count(), self.dim_out());
        let mut norms = Vec::with_capacity(raw.token_count());
        let mut x = vec![0.0; self.dim_in()];
        for t in 0..raw.token_count() {
            for (xi, &r) in x.iter_mut().zip(raw.row(t)) {
                *xi = r as f64;
            }
            let row = out.row_mut(t);
            for (o, w) in row.iter_mut().zip(self.weights.iter_rows()) {
                *o = dot(w, &x);
            }
            let n = dot(row, row).sqrt();
            if n < 1e-12 {
                return Err(Error::DegenerateProjection { id, row: t });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok((out, norms))
    }
}

/// Frozen copy of the pre-trained projection used to initialize students.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSnapshot {
    projection: Projection,
    label: String,
}

impl ParameterSnapshot {
    pub fn new(projection: &Projection, label: impl Into<String>) -> Self {
        Self {
            projection: projection.clone(),
            label: label.into(),
        }
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

fn check_unit_rows(rows: &Matrix) -> Result<()> {
    if rows.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    for r in rows.iter_rows() {
        let n = dot(r, r).sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::invalid(format!("row norm {n} is not unit")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedQuery {
    pub query_id: QueryId,
    rows: Matrix,
}

impl EncodedQuery {
    pub fn new(query_id: QueryId, rows: Matrix) -> Result<Self> {
        check_unit_rows(&rows)?;
        Ok(Self { query_id, rows })
    }

    pub fn encode(query_id: QueryId, raw: &RawEmbeddingMatrix, projection: &Projection) -> Result<Self> {
        Ok(Self {
            query_id,
            rows: projection.project(query_id.0, raw)?,
        })
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn dim_out(&self) -> usize {
        self.rows.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPassage {
    pub passage_id: PassageId,
    rows: Matrix,
}

impl EncodedPassage {
    pub fn new(passage_id: PassageId, rows: Matrix) -> Result<Self> {
        check_unit_rows(&rows)?;
        Ok(Self { passage_id, rows })
    }

    pub fn encode(passage_id: PassageId, raw: &RawEmbeddingMatrix, projection: &Projection) -> Result<Self> {
        Ok(Self {
            passage_id,
            rows: projection.project(passage_id.0, raw)?,
        })
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn dim_out(&self) -> usize {
        self.rows.cols()
    }
}

/// `max_j <v, row_j>` with the smallest maximizing `j`.
#[inline]
pub fn max_inner(v: &[f64], rows: &Matrix) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (j, r) in rows.iter_rows().enumerate() {
        let s = dot(v, r);
        if s > best {
            best = s;
            arg = j;
        }
    }
    (best, arg)
}

/// Unchecked MaxSim over row matrices of equal width.
#[inline]
pub fn maxsim_rows(query: &Matrix, passage: &Matrix) -> f64 {
    query.iter_rows().map(|q| max_inner(q, passage).0).sum()
}

/// `sum_i max_j <q_i, p_j>`.
pub fn maxsim(query: &EncodedQuery, passage: &EncodedPassage) -> Result<f64> {
    if query.dim_out() != passage.dim_out() {
        return Err(Error::DimensionMismatch {
            expected: query.dim_out(),
            actual: passage.dim_out(),
        });
    }
    Ok(maxsim_rows(&query.rows, &passage.rows))
}

/// A probability distribution over an ordered candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceDistribution {
    candidates: Vec<PassageId>,
    probabilities: Vec<f64>,
}

impl RelevanceDistribution {
    pub fn new(candidates: Vec<PassageId>, probabilities: Vec<f64>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::EmptyInput);
        }
        if candidates.len() != probabilities.len() {
            return Err(Error::DimensionMismatch {
                expected: candidates.len(),
                actual: probabilities.len(),
            });
        }
        if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("probability outside [0, 1]"));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {total}")));
        }
        Ok(Self {
            candidates,
            probabilities,
        })
    }

    pub fn candidates(&self) -> &[PassageId] {
        &self.candidates
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn probability_of(&self, pid: PassageId) -> Option<f64> {
        self.candidates
            .iter()
            .position(|&c| c == pid)
            .map(|i| self.probabilities[i])
    }
}

fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Max-shifted softmax of `scores`, aligned with `candidates`.
pub fn softmax_distribution(candidates: &[PassageId], scores: &[f64]) -> Result<RelevanceDistribution> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if candidates.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: candidates.len(),
            actual: scores.len(),
        });
    }
    for &s in scores {
        check_finite(s, "relevance score")?;
    }
    Ok(RelevanceDistribution {
        candidates: candidates.to_vec(),
        probabilities: softmax(scores),
    })
}

/// `KL(target || student) = sum target * ln(target / student)`; zero-mass
/// target entries contribute nothing.
pub fn kl_divergence(target: &RelevanceDistribution, student: &RelevanceDistribution) -> Result<f64> {
    if target.candidates != student.candidates {
        return Err(Error::CandidateMismatch);
    }
    Ok(target
        .probabilities
        .iter()
        .zip(&student.probabilities)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, s)| t * (t.ln() - s.ln()))
        .sum())
}

/// `-ln softmax(positive | positive, negatives...)`.
pub fn hard_loss(positive_score: f64, negative_scores: &[f64]) -> Result<f64> {
    check_finite(positive_score, "positive score")?;
    let mut scores = Vec::with_capacity(negative_scores.len() + 1);
    scores.push(positive_score);
    for &s in negative_scores {
        scores.push(check_finite(s, "negative score")?);
    }
    Ok(-log_softmax(&scores)[0])
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub gradient: Matrix,
}

/// Student distribution over candidates under `projection`.
pub fn student_distribution(
    projection: &Projection,
    query: &RawEmbeddingMatrix,
    candidates: &[(PassageId, &RawEmbeddingMatrix)],
) -> Result<RelevanceDistribution> {
    let q = projection.project(0, query)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for (pid, raw) in candidates {
        scores.push(maxsim_rows(&q, &projection.project(pid.0, raw)?));
    }
    let ids: Vec<PassageId> = candidates.iter().map(|(p, _)| *p).collect();
    softmax_distribution(&ids, &scores)
}

/// KL(target || softmax(student scores)) and its gradient w.r.t. `W`.
pub fn grad_kd_loss(
    projection: &Projection,
    query: &RawEmbeddingMatrix,
    candidates: &[&RawEmbeddingMatrix],
    target: &RelevanceDistribution,
) -> Result<LossGrad> {
    if candidates.len() != target.len() {
        return Err(Error::CandidateMismatch);
    }
    loss_and_grad(projection, query, candidates, target.probabilities())
}

/// Hard loss with `positive` as the labeled candidate, and its gradient.
pub fn grad_hard_loss(
    projection: &Projection,
    query: &RawEmbeddingMatrix,
    positive: &RawEmbeddingMatrix,
    negatives: &[&RawEmbeddingMatrix],
) -> Result<LossGrad> {
    let mut cands = Vec::with_capacity(negatives.len() + 1);
    cands.push(positive);
    cands.extend_from_slice(negatives);
    let mut target = vec![0.0; cands.len()];
    target[0] = 1.0;
    loss_and_grad(projection, query, &cands, &target)
}

/// Cross-entropy of `target` against the student softmax, minus the target
/// entropy (so a one-hot target yields the hard loss and a soft target the
/// KL divergence).
fn loss_and_grad(
    projection: &Projection,
    query: &RawEmbeddingMatrix,
    candidates: &[&RawEmbeddingMatrix],
    target: &[f64],
) -> Result<LossGrad> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (q, q_norms) = projection.project_with_norms(0, query)?;
    let projected: Vec<(Matrix, Vec<f64>)> = candidates
        .iter()
        .enumerate()
        .map(|(c, raw)| projection.project_with_norms(c as u64, raw))
        .collect::<Result<_>>()?;

    let mut scores = Vec::with_capacity(candidates.len());
    let mut argmax: Vec<Vec<usize>> = Vec::with_capacity(candidates.len());
    for (p, _) in &projected {
        let mut s = 0.0;
        let mut args = Vec::with_capacity(q.rows());
        for qi in q.iter_rows() {
            let (m, j) = max_inner(qi, p);
            s += m;
            args.push(j);
        }
        scores.push(s);
        argmax.push(args);
    }
    let log_p = log_softmax(&scores);
    let loss: f64 = target
        .iter()
        .zip(&log_p)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, lp)| t * (t.ln() - lp))
        .sum();

    // dL/ds_c = p_c - t_c
    let dscore: Vec<f64> = log_p.iter().zip(target).map(|(lp, t)| lp.exp() - t).collect();

    let dim_out = projection.dim_out();
    let mut grad_q = Matrix::zeros(q.rows(), dim_out);
    let mut gradient = Matrix::zeros(dim_out, projection.dim_in());
    for (c, (p, p_norms)) in projected.iter().enumerate() {
        let d = dscore[c];
        if d == 0.0 {
            continue;
        }
        let mut grad_p = Matrix::zeros(p.rows(), dim_out);
        for (i, &j) in argmax[c].iter().enumerate() {
            for (g, v) in grad_q.row_mut(i).iter_mut().zip(p.row(j)) {
                *g += d * v;
            }
            for (g, v) in grad_p.row_mut(j).iter_mut().zip(q.row(i)) {
                *g += d * v;
            }
        }
        accumulate_through_normalization(&mut gradient, &grad_p, p, p_norms, candidates[c]);
    }
    accumulate_through_normalization(&mut gradient, &grad_q, &q, &q_norms, query);

    Ok(LossGrad { loss, gradient })
}

/// For `v = u / |u|`, `u = W x`: `dL/du = (g - (g.v) v) / |u|`, and
/// `dL/dW += dL/du x^T`.
fn accumulate_through_normalization(
    gradient: &mut Matrix,
    grad_rows: &Matrix,
    unit_rows: &Matrix,
    norms: &[f64],
    raw: &RawEmbeddingMatrix,
) {
    let dim_out = unit_rows.cols();
    let mut gu = vec![0.0; dim_out];
    for (t, &n) in norms.iter().enumerate().take(unit_rows.rows()) {
        let g = grad_rows.row(t);
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let v = unit_rows.row(t);
        let gv = dot(g, v);
        for ((o, gi), vi) in gu.iter_mut().zip(g).zip(v) {
            *o = (gi - gv * vi) / n;
        }
        let x = raw.row(t);
        for (o, &go) in gu.iter().enumerate() {
            let row = gradient.row_mut(o);
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += go * xi as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows[0].len(), rows)
    }

    fn q(rows: &[Vec<f64>]) -> EncodedQuery {
        EncodedQuery::new(QueryId(1), unit(rows)).unwrap()
    }

    fn p(rows: &[Vec<f64>]) -> EncodedPassage {
        EncodedPassage::new(PassageId(1), unit(rows)).unwrap()
    }

    /// Double loop with no shared helpers.
    fn naive_maxsim(q: &[Vec<f64>], p: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for qi in q {
            let mut best = f64::NEG_INFINITY;
            for pj in p {
                let mut s = 0.0;
                for k in 0..qi.len() {
                    s += qi[k] * pj[k];
                }
                if s > best {
                    best = s;
                }
            }
            total += best;
        }
        total
    }

    #[test]
    fn maxsim_worked_example() {
        let qr = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let pr = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        let s = maxsim(&q(&qr), &p(&pr)).unwrap();
        assert!((s - 1.8).abs() < 1e-12);
        assert!((s - naive_maxsim(&qr, &pr)).abs() < 1e-15);
    }

    #[test]
    fn maxsim_self_match_and_orthogonal() {
        let qr = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        let pr = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.6, 0.8]];
        assert!((maxsim(&q(&qr), &p(&pr)).unwrap() - 2.0).abs() < 1e-12);
        let orth = maxsim(&q(&[vec![1.0, 0.0]]), &p(&[vec![0.0, 1.0], vec![0.0, -1.0]])).unwrap();
        assert_eq!(orth, 0.0);
    }

    #[test]
    fn maxsim_dim_mismatch() {
        let err = maxsim(&q(&[vec![1.0, 0.0]]), &p(&[vec![1.0, 0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn softmax_cases() {
        let ids = [PassageId(1), PassageId(2)];
        let d = softmax_distribution(&ids[..1], &[3.0]).unwrap();
        assert_eq!(d.probabilities(), &[1.0]);
        let d = softmax_distribution(&ids, &[0.0, 3f64.ln()]).unwrap();
        assert!((d.probabilities()[0] - 0.25).abs() < 1e-15);
        assert!((d.probabilities()[1] - 0.75).abs() < 1e-15);
        assert!(softmax_distribution(&[], &[]).is_err());
        assert!(softmax_distribution(&ids, &[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn kl_cases() {
        let ids = vec![PassageId(1), PassageId(2)];
        let t = RelevanceDistribution::new(ids.clone(), vec![0.5, 0.5]).unwrap();
        let s = RelevanceDistribution::new(ids.clone(), vec![0.25, 0.75]).unwrap();
        assert!(kl_divergence(&t, &t).unwrap().abs() < 1e-12);
        let forward = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&t, &s).unwrap() - forward).abs() < 1e-12);
        assert!((forward - 0.14384).abs() < 5e-6);
        let backward = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((kl_divergence(&s, &t).unwrap() - backward).abs() < 1e-12);
        assert!((backward - 0.13081).abs() < 5e-6);
        assert!((backward - forward).abs() > 1e-3);
        let other = RelevanceDistribution::new(vec![PassageId(1), PassageId(3)], vec![0.5, 0.5]).unwrap();
        assert!(matches!(kl_divergence(&t, &other), Err(Error::CandidateMismatch)));
    }

    #[test]
    fn hard_loss_cases() {
        assert_eq!(hard_loss(3.0, &[]).unwrap(), 0.0);
        assert!((hard_loss(1.0, &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let expected = (1.0 + (-2f64).exp()).ln();
        assert!((hard_loss(2.0, &[0.0]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.1269).abs() < 5e-5);
        assert!(hard_loss(f64::INFINITY, &[]).is_err());
        assert!(hard_loss(0.0, &[f64::NAN]).is_err());
    }

    #[test]
    fn projection_rejects_wrong_width() {
        let w = Projection::random(2, 3, 1);
        let raw = RawEmbeddingMatrix::new(1, 4, vec![1.0; 4]).unwrap();
        assert!(w.project(0, &raw).is_err());
    }

    #[test]
    fn snapshot_is_a_deep_copy() {
        let mut w = Projection::random(2, 3, 1);
        let snap = ParameterSnapshot::new(&w, "pretrained-theta");
        w.weights_mut().scale(2.0);
        assert_ne!(snap.projection(), &w);
        assert_eq!(snap.label(), "pretrained-theta");
    }

    fn vecs(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, dim), 1..6).prop_map(|rows| {
            rows.into_iter()
                .map(|mut r| {
                    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
                    r.iter_mut().for_each(|x| *x /= n);
                    if r.iter().all(|x| x.abs() < 1e-9) {
                        r[0] = 1.0;
                    }
                    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                    r.iter_mut().for_each(|x| *x /= n);
                    r
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn maxsim_invariants(qr in vecs(3), mut pr in vecs(3), extra in vecs(3)) {
            let base = maxsim(&q(&qr), &p(&pr)).unwrap();
            prop_assert!((base - naive_maxsim(&qr, &pr)).abs() < 1e-12);
            pr.reverse();
            prop_assert!((maxsim(&q(&qr), &p(&pr)).unwrap() - base).abs() < 1e-12);
            pr.push(extra[0].clone());
            prop_assert!(maxsim(&q(&qr), &p(&pr)).unwrap() >= base - 1e-12);
        }

        #[test]
        fn softmax_shift_invariant_and_kl_nonnegative(
            scores in proptest::collection::vec(-20.0f64..20.0, 1..8),
            other in proptest::collection::vec(-20.0f64..20.0, 8),
            shift in -50.0f64..50.0,
        ) {
            let ids: Vec<PassageId> = (0..scores.len() as u64).map(PassageId).collect();
            let a = softmax_distribution(&ids, &scores).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let b = softmax_distribution(&ids, &shifted).unwrap();
            for (x, y) in a.probabilities().iter().zip(b.probabilities()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let sum: f64 = a.probabilities().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            let c = softmax_distribution(&ids, &other[..scores.len()]).unwrap();
            prop_assert!(kl_divergence(&a, &c).unwrap() >= -1e-12);
        }

        #[test]
        fn hard_loss_is_cross_entropy_of_softmax(
            pos in -10.0f64..10.0,
            negs in proptest::collection::vec(-10.0f64..10.0, 0..6),
        ) {
            let mut scores = vec![pos];
            scores.extend_from_slice(&negs);
            let ids: Vec<PassageId> = (0..scores.len() as u64).map(PassageId).collect();
            let d = softmax_distribution(&ids, &scores).unwrap();
            let ce = -d.probabilities()[0].ln();
            prop_assert!((hard_loss(pos, &negs).unwrap() - ce).abs() < 1e-9);
        }
    }
}
