//! Shared helpers for the unit-test suites. Compiled only for tests.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::TargetSet;
use crate::losses::FeatureBatch;
use crate::matching::{Assignment, AssignmentState};
use crate::rng::rng_from_seed;

/// Random unit-norm rows.
pub fn unit_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    let mut rows = Array2::<f64>::zeros((n, d));
    for mut row in rows.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-9 {
                row.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }
    rows
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
pub fn random_rotation(d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    let mut q = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        loop {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            for j in 0..i {
                let dot: f64 = (0..d).map(|k| v[k] * q[[j, k]]).sum();
                for k in 0..d {
                    v[k] -= dot * q[[j, k]];
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for k in 0..d {
                    q[[i, k]] = v[k] / norm;
                }
                break;
            }
        }
    }
    q
}

/// Build an assignment state where each listed session assigns its classes to
/// the next free target indices in order (class list order = target order).
pub fn assigned_state(targets: &TargetSet, sessions: &[Vec<i64>]) -> AssignmentState {
    let mut state = AssignmentState::new(targets.count());
    let mut next = 0usize;
    for classes in sessions {
        let mut pairs = Vec::new();
        for &c in classes {
            state.assigned.insert(c, next);
            state.unassigned.remove(&next);
            pairs.push((c, next));
            next += 1;
        }
        state.history.push(Assignment { pairs, cost: 0.0 });
    }
    state
}

/// Central-difference gradient of `f` with respect to every feature entry.
pub fn fd_grad_features<F: Fn(&FeatureBatch) -> f64>(
    f: F,
    batch: &FeatureBatch,
    eps: f64,
) -> Array2<f64> {
    let mut grad = Array2::<f64>::zeros(batch.features.raw_dim());
    for i in 0..batch.features.nrows() {
        for j in 0..batch.features.ncols() {
            let mut plus = batch.clone();
            plus.features[[i, j]] += eps;
            let mut minus = batch.clone();
            minus.features[[i, j]] -= eps;
            grad[[i, j]] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
    }
    grad
}

/// Largest elementwise difference relative to the largest magnitude present.
pub fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = a.iter().chain(b.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
}
