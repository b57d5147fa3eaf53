//! Class-to-target assignment: class means, cosine cost matrices, optimal
//! one-to-one matching, and the session-to-session assignment bookkeeping.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::error::{OrcoError, Result};
use crate::geometry::TargetSet;
use crate::losses::FeatureBatch;
use crate::rng::rng_from_seed;

/// Per-class mean embeddings, renormalized to the unit sphere and ordered by
/// ascending class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    pub class_ids: Vec<i64>,
    pub means: Array2<f64>,
    pub sample_counts: Vec<usize>,
}

/// One matching of classes to target indices with its total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(i64, usize)>,
    pub cost: f64,
}

/// How incoming classes are matched to pseudo-targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentStrategy {
    /// Hungarian matching of only the new classes against only the unassigned
    /// pool; earlier assignments are carried forward untouched.
    Greedy,
    /// Every class seen so far is re-matched against all targets from scratch.
    Reassignment,
    /// New classes get uniformly random distinct unassigned targets.
    Random,
}

impl std::fmt::Display for AssignmentStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AssignmentStrategy::Greedy => write!(f, "greedy"),
            AssignmentStrategy::Reassignment => write!(f, "reassignment"),
            AssignmentStrategy::Random => write!(f, "random"),
        }
    }
}

/// The evolving class-to-target map plus the pool of still-unassigned targets.
///
/// Operations return updated copies; the struct is a plain value.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentState {
    pub assigned: BTreeMap<i64, usize>,
    pub unassigned: BTreeSet<usize>,
    pub history: Vec<Assignment>,
}

impl AssignmentState {
    /// Fresh state with every target index unassigned.
    pub fn new(target_count: usize) -> Self {
        Self {
            assigned: BTreeMap::new(),
            unassigned: (0..target_count).collect(),
            history: Vec::new(),
        }
    }

    pub fn target_count(&self) -> usize {
        self.assigned.len() + self.unassigned.len()
    }

    /// Index of the history record that first assigned `class_id`.
    pub fn introduction_session(&self, class_id: i64) -> Option<usize> {
        self.history
            .iter()
            .position(|a| a.pairs.iter().any(|(c, _)| *c == class_id))
    }

    /// Classes first assigned after the base record (history index >= 1).
    pub fn incremental_classes(&self) -> Vec<i64> {
        self.assigned
            .keys()
            .copied()
            .filter(|c| self.introduction_session(*c).map_or(false, |s| s >= 1))
            .collect()
    }

    fn check_partition(&self) -> Result<()> {
        for idx in self.assigned.values() {
            if self.unassigned.contains(idx) {
                return Err(OrcoError::InvalidState(format!(
                    "target {idx} is both assigned and unassigned"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for idx in self.assigned.values() {
            if !seen.insert(*idx) {
                return Err(OrcoError::InvalidState(format!(
                    "target {idx} assigned to two classes"
                )));
            }
        }
        Ok(())
    }

    /// Text form used to persist state between CLI invocations.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (class, target) in &self.assigned {
            out.push_str(&format!("class {class} -> target {target}\n"));
        }
        let idx: Vec<String> = self.unassigned.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!("unassigned: {}\n", idx.join(" ")));
        out
    }

    /// Parse the [`serialize`](Self::serialize) format. History is collapsed
    /// into one record since the text form does not retain session boundaries.
    pub fn parse(text: &str) -> Result<Self> {
        let mut assigned = BTreeMap::new();
        let mut unassigned = BTreeSet::new();
        let mut saw_unassigned = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| OrcoError::Parse { line: lineno + 1, message: m };
            if let Some(rest) = line.strip_prefix("unassigned:") {
                for tok in rest.split_whitespace() {
                    let idx: usize =
                        tok.parse().map_err(|_| bad(format!("bad target index `{tok}`")))?;
                    unassigned.insert(idx);
                }
                saw_unassigned = true;
            } else {
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != 5 || parts[0] != "class" || parts[2] != "->" || parts[3] != "target"
                {
                    return Err(bad(format!("expected `class <id> -> target <index>`, got `{line}`")));
                }
                let class: i64 =
                    parts[1].parse().map_err(|_| bad(format!("bad class id `{}`", parts[1])))?;
                let target: usize =
                    parts[4].parse().map_err(|_| bad(format!("bad target index `{}`", parts[4])))?;
                if assigned.insert(class, target).is_some() {
                    return Err(bad(format!("class {class} listed twice")));
                }
            }
        }
        if !saw_unassigned {
            return Err(OrcoError::Parse {
                line: text.lines().count().max(1),
                message: "missing `unassigned:` line".into(),
            });
        }
        let pairs: Vec<(i64, usize)> = assigned.iter().map(|(c, t)| (*c, *t)).collect();
        let state = Self {
            assigned,
            unassigned,
            history: vec![Assignment { pairs, cost: f64::NAN }],
        };
        state.check_partition()?;
        Ok(state)
    }
}

/// Arithmetic mean of same-label feature rows, renormalized to the sphere.
/// A class whose mean collapses below 1e-12 norm is reported as degenerate.
pub fn class_means(batch: &FeatureBatch) -> Result<ClassMeans> {
    if batch.len() == 0 {
        return Err(OrcoError::InvalidArgument("empty batch".into()));
    }
    let mut per_class: BTreeMap<i64, (Vec<f64>, usize)> = BTreeMap::new();
    let dim = batch.features.ncols();
    for (row, &label) in batch.features.rows().into_iter().zip(&batch.labels) {
        let entry = per_class.entry(label).or_insert_with(|| (vec![0.0; dim], 0));
        for (acc, v) in entry.0.iter_mut().zip(row.iter()) {
            *acc += v;
        }
        entry.1 += 1;
    }
    let mut class_ids = Vec::with_capacity(per_class.len());
    let mut sample_counts = Vec::with_capacity(per_class.len());
    let mut means = Array2::<f64>::zeros((per_class.len(), dim));
    for (i, (class, (sum, count))) in per_class.into_iter().enumerate() {
        let mut norm2 = 0.0;
        for (j, s) in sum.iter().enumerate() {
            let m = s / count as f64;
            means[[i, j]] = m;
            norm2 += m * m;
        }
        let norm = norm2.sqrt();
        if norm < 1e-12 {
            return Err(OrcoError::DegenerateMean { class_id: class });
        }
        for j in 0..dim {
            means[[i, j]] /= norm;
        }
        class_ids.push(class);
        sample_counts.push(count);
    }
    Ok(ClassMeans { class_ids, means, sample_counts })
}

/// Cost matrix for matching class means to candidate targets:
/// entry (i, j) = -(mean_i . target_{candidates[j]}).
pub fn assignment_cost(
    means: &ClassMeans,
    targets: &TargetSet,
    candidate_indices: &[usize],
) -> Result<Array2<f64>> {
    if candidate_indices.is_empty() {
        return Err(OrcoError::InvalidArgument("no candidate targets".into()));
    }
    if candidate_indices.len() < means.class_ids.len() {
        return Err(OrcoError::Capacity(format!(
            "{} classes but only {} candidate targets",
            means.class_ids.len(),
            candidate_indices.len()
        )));
    }
    for &idx in candidate_indices {
        if idx >= targets.count() {
            return Err(OrcoError::InvalidArgument(format!("target index {idx} out of range")));
        }
    }
    let mut cost = Array2::<f64>::zeros((means.class_ids.len(), candidate_indices.len()));
    for i in 0..means.class_ids.len() {
        for (j, &t) in candidate_indices.iter().enumerate() {
            cost[[i, j]] = -means.means.row(i).dot(&targets.vectors.row(t));
        }
    }
    Ok(cost)
}

/// Minimum-cost one-to-one assignment of every row to a distinct column
/// (rows <= columns required). Returns the lexicographically smallest pair
/// list among cost-equal optima, so the result is deterministic.
pub fn hungarian(cost: &Array2<f64>) -> Result<Assignment> {
    let (row_to_col, total) = hungarian_indices(cost)?;
    let pairs = row_to_col.iter().enumerate().map(|(r, &c)| (r as i64, c)).collect();
    Ok(Assignment { pairs, cost: total })
}

/// Index-level solver behind [`hungarian`].
pub fn hungarian_indices(cost: &Array2<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    let m = cost.ncols();
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    if n > m {
        return Err(OrcoError::InvalidArgument(format!(
            "cost matrix must have rows <= columns, got {n}x{m}"
        )));
    }
    for v in cost.iter() {
        if !v.is_finite() {
            return Err(OrcoError::InvalidArgument("cost matrix has a non-finite entry".into()));
        }
    }
    let base = solve_min_cost(cost);
    let total: f64 = base.iter().enumerate().map(|(r, &c)| cost[[r, c]]).sum();
    let refined = lexicographically_smallest(cost, total);
    let refined_total: f64 = refined.iter().enumerate().map(|(r, &c)| cost[[r, c]]).sum();
    Ok((refined, refined_total))
}

/// Shortest-augmenting-path Hungarian algorithm (O(n^2 m)); rows <= cols.
fn solve_min_cost(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let m = cost.ncols();
    // 1-indexed potentials; p[j] = row matched to column j (0 = none).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Fix columns row by row, keeping a choice only if the remaining subproblem
/// can still reach the optimal total. Yields the lexicographically smallest
/// optimal pair list.
fn lexicographically_smallest(cost: &Array2<f64>, optimal_total: f64) -> Vec<usize> {
    let n = cost.nrows();
    let m = cost.ncols();
    let scale: f64 = cost.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-9 * (1.0 + scale * n as f64);

    let mut available: Vec<usize> = (0..m).collect();
    let mut result = vec![usize::MAX; n];
    let mut remaining_total = optimal_total;
    for i in 0..n {
        let rows_left = n - i - 1;
        for (pos, &col) in available.iter().enumerate() {
            let fixed = cost[[i, col]];
            let sub_total = if rows_left == 0 {
                0.0
            } else {
                let mut sub = Array2::<f64>::zeros((rows_left, available.len() - 1));
                for r in 0..rows_left {
                    let mut cj = 0;
                    for (q, &c) in available.iter().enumerate() {
                        if q == pos {
                            continue;
                        }
                        sub[[r, cj]] = cost[[i + 1 + r, c]];
                        cj += 1;
                    }
                }
                let sol = solve_min_cost(&sub);
                sol.iter().enumerate().map(|(r, &c)| sub[[r, c]]).sum()
            };
            if fixed + sub_total <= remaining_total + tol {
                result[i] = col;
                remaining_total -= fixed;
                available.remove(pos);
                break;
            }
        }
        debug_assert!(result[i] != usize::MAX, "no feasible column for row {i}");
    }
    result
}

/// Advance the assignment by one session of new class means.
pub fn assign_session(
    state: &AssignmentState,
    means: &ClassMeans,
    targets: &TargetSet,
    strategy: AssignmentStrategy,
    seed: u64,
) -> Result<AssignmentState> {
    let mut next = state.clone();
    if means.class_ids.is_empty() {
        next.history.push(Assignment { pairs: Vec::new(), cost: 0.0 });
        return Ok(next);
    }
    match strategy {
        AssignmentStrategy::Greedy => {
            check_new_classes(state, &means.class_ids)?;
            let candidates: Vec<usize> = state.unassigned.iter().copied().collect();
            let cost = assignment_cost(means, targets, &candidates)?;
            let (row_to_col, total) = hungarian_indices(&cost)?;
            let mut pairs = Vec::with_capacity(row_to_col.len());
            for (row, &col) in row_to_col.iter().enumerate() {
                let class = means.class_ids[row];
                let target = candidates[col];
                next.assigned.insert(class, target);
                next.unassigned.remove(&target);
                pairs.push((class, target));
            }
            next.history.push(Assignment { pairs, cost: total });
        }
        AssignmentStrategy::Reassignment => {
            for class in state.assigned.keys() {
                if !means.class_ids.contains(class) {
                    return Err(OrcoError::InvalidArgument(format!(
                        "reassignment needs a mean for every seen class; class {class} missing"
                    )));
                }
            }
            let all: Vec<usize> = (0..targets.count()).collect();
            let cost = assignment_cost(means, targets, &all)?;
            let (row_to_col, total) = hungarian_indices(&cost)?;
            next.assigned.clear();
            next.unassigned = (0..targets.count()).collect();
            let mut pairs = Vec::with_capacity(row_to_col.len());
            for (row, &col) in row_to_col.iter().enumerate() {
                let class = means.class_ids[row];
                next.assigned.insert(class, col);
                next.unassigned.remove(&col);
                pairs.push((class, col));
            }
            next.history.push(Assignment { pairs, cost: total });
        }
        AssignmentStrategy::Random => {
            check_new_classes(state, &means.class_ids)?;
            let mut pool: Vec<usize> = state.unassigned.iter().copied().collect();
            let mut rng = rng_from_seed(seed);
            pool.shuffle(&mut rng);
            let mut pairs = Vec::with_capacity(means.class_ids.len());
            let mut total = 0.0;
            for (row, &class) in means.class_ids.iter().enumerate() {
                let target = pool[row];
                next.assigned.insert(class, target);
                next.unassigned.remove(&target);
                total -= means.means.row(row).dot(&targets.vectors.row(target));
                pairs.push((class, target));
            }
            next.history.push(Assignment { pairs, cost: total });
        }
    }
    next.check_partition()?;
    Ok(next)
}

fn check_new_classes(state: &AssignmentState, class_ids: &[i64]) -> Result<()> {
    for class in class_ids {
        if state.assigned.contains_key(class) {
            return Err(OrcoError::InvalidArgument(format!(
                "class {class} is already assigned"
            )));
        }
    }
    if state.unassigned.len() < class_ids.len() {
        return Err(OrcoError::Capacity(format!(
            "{} new classes but only {} unassigned targets",
            class_ids.len(),
            state.unassigned.len()
        )));
    }
    Ok(())
}
