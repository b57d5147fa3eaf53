//! Cross-entropy against assigned pseudo-targets: softmax over the dot
//! products of a feature with the targets of the classes in scope, pulling
//! each contributing feature toward its own class target.

use ndarray::Array2;

use crate::error::{OrcoError, Result};

use super::{CeScope, ContrastiveContext, FeatureBatch, LossResult};

pub fn ce_loss(batch: &FeatureBatch, ctx: &ContrastiveContext) -> Result<LossResult> {
    let scope_classes: Vec<i64> = match ctx.ce_scope {
        CeScope::All => ctx.assignment.assigned.keys().copied().collect(),
        CeScope::IncrementalOnly => ctx.assignment.incremental_classes(),
    };
    if scope_classes.is_empty() {
        return Err(OrcoError::EmptyScope(
            "no classes in cross-entropy scope (incremental-only scope before any incremental session?)"
                .into(),
        ));
    }
    let contributing: Vec<usize> = (0..batch.len())
        .filter(|&i| scope_classes.contains(&batch.labels[i]))
        .collect();
    if contributing.is_empty() {
        return Err(OrcoError::EmptyScope(
            "no batch sample belongs to a class in the cross-entropy scope".into(),
        ));
    }

    let dim = batch.dim();
    let k = scope_classes.len();
    let mut class_targets = Array2::<f64>::zeros((k, dim));
    for (c, class) in scope_classes.iter().enumerate() {
        let t = ctx.assignment.assigned[class];
        class_targets.row_mut(c).assign(&ctx.targets.vectors.row(t));
    }

    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros(batch.features.raw_dim());
    let inv_n = 1.0 / contributing.len() as f64;
    for &i in &contributing {
        let logits = class_targets.dot(&batch.features.row(i));
        let label_pos = scope_classes.iter().position(|c| *c == batch.labels[i]).unwrap();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        value += (m + denom.ln() - logits[label_pos]) * inv_n;
        for c in 0..k {
            let softmax = (logits[c] - m).exp() / denom;
            let coeff = (softmax - if c == label_pos { 1.0 } else { 0.0 }) * inv_n;
            grad.row_mut(i).scaled_add(coeff, &class_targets.row(c));
        }
    }
    Ok(LossResult { value, grad_features: grad, grad_aux: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_random_targets, PerturbedTargets, TargetSet};
    use crate::losses::PerturbScope;
    use crate::testutil::{assigned_state, fd_grad_features, max_rel_err, unit_rows};
    use ndarray::array;

    fn ctx_all<'a>(
        state: &'a crate::matching::AssignmentState,
        targets: &'a TargetSet,
        perturbed: &'a PerturbedTargets,
        scope: CeScope,
    ) -> ContrastiveContext<'a> {
        ContrastiveContext::new(
            state,
            targets,
            perturbed,
            0.1,
            PerturbScope::IncrementalAndUnassigned,
            scope,
        )
        .unwrap()
    }

    #[test]
    fn hand_value_feature_on_its_target() {
        // feature equals its target, the other class target orthogonal:
        // logits [1, 0] -> loss = -log(e/(e+1))
        let targets = TargetSet::from_vectors(array![[1.0, 0.0], [0.0, 1.0]], 0).unwrap();
        let state = assigned_state(&targets, &[vec![0, 1]]);
        let empty = PerturbedTargets::empty(2);
        let ctx = ctx_all(&state, &targets, &empty, CeScope::All);
        let batch =
            FeatureBatch::new(array![[1.0, 0.0]], vec![0], vec![0], vec![0]).unwrap();
        let r = ce_loss(&batch, &ctx).unwrap();
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((r.value - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        // feature orthogonal to all K class targets -> loss = log K
        let targets = TargetSet::from_vectors(ndarray::Array2::eye(4), 0).unwrap();
        let state = assigned_state(&targets, &[vec![0, 1, 2]]);
        let empty = PerturbedTargets::empty(4);
        let ctx = ctx_all(&state, &targets, &empty, CeScope::All);
        let batch =
            FeatureBatch::new(array![[0.0, 0.0, 0.0, 1.0]], vec![1], vec![0], vec![0]).unwrap();
        let r = ce_loss(&batch, &ctx).unwrap();
        assert!((r.value - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_matches_finite_differences() {
        for seed in 0..6u64 {
            let targets = generate_random_targets(5, 7, seed).unwrap();
            let state = assigned_state(&targets, &[vec![0, 1], vec![2, 3]]);
            let empty = PerturbedTargets::empty(7);
            let ctx = ctx_all(&state, &targets, &empty, CeScope::All);
            let rows = unit_rows(6, 7, 100 + seed);
            let batch = FeatureBatch::new(
                rows,
                vec![0, 1, 2, 3, 0, 2],
                vec![0; 6],
                vec![0, 0, 1, 1, 0, 1],
            )
            .unwrap();
            let r = ce_loss(&batch, &ctx).unwrap();
            let numeric = fd_grad_features(|b| ce_loss(b, &ctx).unwrap().value, &batch, 1e-5);
            let err = max_rel_err(&r.grad_features, &numeric);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn incremental_scope_filters_samples_and_logits() {
        let targets = generate_random_targets(4, 6, 2).unwrap();
        let state = assigned_state(&targets, &[vec![0, 1], vec![2]]);
        let empty = PerturbedTargets::empty(6);
        let ctx = ctx_all(&state, &targets, &empty, CeScope::IncrementalOnly);
        let rows = unit_rows(3, 6, 3);
        let batch = FeatureBatch::new(rows, vec![0, 1, 2], vec![0; 3], vec![0, 0, 1]).unwrap();
        // only class 2 is incremental; its single logit gives loss 0
        let r = ce_loss(&batch, &ctx).unwrap();
        assert!(r.value.abs() < 1e-12);
        assert!(r.grad_features.row(0).iter().all(|v| *v == 0.0));
        assert!(r.grad_features.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_scope_errors() {
        let targets = generate_random_targets(4, 6, 2).unwrap();
        // base-only assignment: incremental scope is empty
        let state = assigned_state(&targets, &[vec![0, 1]]);
        let empty = PerturbedTargets::empty(6);
        let ctx = ctx_all(&state, &targets, &empty, CeScope::IncrementalOnly);
        let rows = unit_rows(2, 6, 3);
        let batch = FeatureBatch::new(rows, vec![0, 1], vec![0; 2], vec![0; 2]).unwrap();
        assert!(matches!(ce_loss(&batch, &ctx), Err(OrcoError::EmptyScope(_))));
    }

    #[test]
    fn moving_toward_target_decreases_loss() {
        // slerp a contributing feature toward its target; CE must fall
        // strictly at each of 5 interpolation points.
        let targets = generate_random_targets(3, 8, 9).unwrap();
        let state = assigned_state(&targets, &[vec![0, 1, 2]]);
        let empty = PerturbedTargets::empty(8);
        let ctx = ctx_all(&state, &targets, &empty, CeScope::All);
        let rows = unit_rows(3, 8, 10);
        let target0 = targets.vectors.row(state.assigned[&0]).to_owned();

        let start = rows.row(0).to_owned();
        let omega = start.dot(&target0).clamp(-1.0, 1.0).acos();
        let mut last = f64::INFINITY;
        for step in 0..=5 {
            let t = step as f64 / 5.0 * 0.9; // stop short of exact alignment
            let a = ((1.0 - t) * omega).sin() / omega.sin();
            let b = (t * omega).sin() / omega.sin();
            let mut rows_t = rows.clone();
            for j in 0..8 {
                rows_t[[0, j]] = a * start[j] + b * target0[j];
            }
            let batch =
                FeatureBatch::new_unchecked(rows_t, vec![0, 1, 2], vec![0; 3], vec![0; 3]);
            let v = ce_loss(&batch, &ctx).unwrap().value;
            assert!(v < last, "step {step}: {v} !< {last}");
            last = v;
        }
    }
}
