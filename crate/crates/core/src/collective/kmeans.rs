//! Seeded k-means++ / Lloyd clustering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};

pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// SSE after every assignment step, including the final one.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn sse(&self) -> f64 {
        self.sse_history.last().copied().unwrap_or(0.0)
    }
}

/// Clusters the rows of `points` into `k` groups.
///
/// Initialization is k-means++ from `seed`. Lloyd iterations stop once no
/// centroid moves by `tol` or more (Euclidean) or after `max_iters` updates.
/// A cluster left empty by an assignment step is re-seeded at the point
/// farthest from its own centroid.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if n < k {
        return Err(Error::InsufficientPoints { k, available: n });
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_plus_plus(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters {
        sse_history.push(assign(points, &centroids, &mut assignments));
        let updated = update(points, &centroids, &mut assignments, k);
        let movement = (0..k)
            .map(|c| squared_distance(updated.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        iterations += 1;
        if movement < tol {
            break;
        }
    }
    sse_history.push(assign(points, &centroids, &mut assignments));

    Ok(KMeansResult {
        centroids,
        assignments,
        sse_history,
        iterations,
    })
}

fn init_plus_plus(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // rounding can run past the end; fall back to the last positive weight
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), centroids.row(c)));
        }
    }
    centroids
}

/// Nearest centroid per point (smallest index on ties); returns the SSE.
fn assign(points: &Matrix, centroids: &Matrix, assignments: &mut [usize]) -> f64 {
    let mut sse = 0.0;
    for (i, a) in assignments.iter_mut().enumerate() {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for (c, centroid) in centroids.iter_rows().enumerate() {
            let d = squared_distance(points.row(i), centroid);
            if d < best {
                best = d;
                arg = c;
            }
        }
        *a = arg;
        sse += best;
    }
    sse
}

fn update(points: &Matrix, previous: &Matrix, assignments: &mut [usize], k: usize) -> Matrix {
    let dim = points.cols();
    let mut sums = Matrix::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let inv = 1.0 / n as f64;
            sums.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        } else {
            sums.row_mut(c).copy_from_slice(previous.row(c));
        }
    }
    let mut taken = vec![false; points.rows()];
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &a) in assignments.iter().enumerate() {
            if taken[i] || counts[a] <= 1 {
                continue;
            }
            let d = squared_distance(points.row(i), sums.row(a));
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        if let Some(i) = far {
            taken[i] = true;
            counts[assignments[i]] -= 1;
            assignments[i] = c;
            counts[c] = 1;
            sums.row_mut(c).copy_from_slice(points.row(i));
        }
    }
    sums
}
