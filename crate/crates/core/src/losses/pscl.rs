//! Perturbed supervised contrastive loss.
//!
//! Two anchor families share one InfoNCE form:
//!
//! - real anchors (batch rows): positives are the other same-label rows, the
//!   anchor's assigned target, and that target's perturbations when it is in
//!   the perturbation scope; negatives are all other batch rows plus every
//!   in-scope perturbation of *other* targets;
//! - unassigned-target anchors: positives are the target's own perturbations;
//!   negatives are all batch rows plus the perturbations of other targets.
//!
//! Targets and perturbations are constants: gradients flow to batch features
//! only. The loss is the mean over all anchors of both families.

use ndarray::{Array1, Array2};

use crate::error::{OrcoError, Result};

use super::{require_perturbations, ContrastiveContext, FeatureBatch, LossResult};

pub fn pscl_loss(batch: &FeatureBatch, ctx: &ContrastiveContext) -> Result<LossResult> {
    require_perturbations(ctx)?;
    let b = batch.len();
    let q = ctx.perturbed.len();
    let dim = batch.dim();
    if dim != ctx.targets.dim() {
        return Err(OrcoError::InvalidArgument(format!(
            "batch dim {dim} does not match target dim {}",
            ctx.targets.dim()
        )));
    }
    let mut anchor_target = Vec::with_capacity(b);
    for &label in &batch.labels {
        match ctx.assignment.assigned.get(&label) {
            Some(&t) => anchor_target.push(t),
            None => return Err(OrcoError::UnassignedClass { class_id: label }),
        }
    }

    let tau = ctx.tau;
    // candidate columns: [batch rows | perturbation rows]
    let total = b + q;
    let mut sims = Array2::<f64>::zeros((b, total));
    {
        let zz = batch.features.dot(&batch.features.t());
        sims.slice_mut(ndarray::s![.., ..b]).assign(&zz);
        if q > 0 {
            let zp = batch.features.dot(&ctx.perturbed.vectors.t());
            sims.slice_mut(ndarray::s![.., b..]).assign(&zp);
        }
    }
    sims /= tau;

    let mut grad = Array2::<f64>::zeros(batch.features.raw_dim());
    let mut value = 0.0;
    let mut anchor_count = 0usize;

    // --- real anchors ---
    for r in 0..b {
        let own_target = anchor_target[r];
        let row = sims.row(r);

        let mut pos_cols: Vec<usize> = (0..b)
            .filter(|&j| j != r && batch.labels[j] == batch.labels[r])
            .collect();
        for (pq, &base) in ctx.perturbed.base_index.iter().enumerate() {
            if base == own_target {
                pos_cols.push(b + pq);
            }
        }
        let target_sim = batch.features.row(r).dot(&ctx.targets.vectors.row(own_target)) / tau;
        let p_count = pos_cols.len() + 1; // + the assigned target itself

        let neg_cols: Vec<usize> = (0..total)
            .filter(|&c| {
                if c < b {
                    c != r
                } else {
                    ctx.perturbed.base_index[c - b] != own_target
                }
            })
            .collect();

        // stable log-sum-exp over the negatives
        let m = neg_cols.iter().map(|&c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = neg_cols.iter().map(|&c| (row[c] - m).exp()).sum();
        let log_denom = m + denom.ln();

        let inv_p = 1.0 / p_count as f64;
        let mut pos_mean = target_sim;
        for &c in &pos_cols {
            pos_mean += row[c];
        }
        pos_mean *= inv_p;
        value += log_denom - pos_mean;
        anchor_count += 1;

        let mut g_r = Array1::<f64>::zeros(dim);
        for &c in &neg_cols {
            let w = (row[c] - m).exp() / denom;
            if c < b {
                g_r.scaled_add(w / tau, &batch.features.row(c));
                grad.row_mut(c).scaled_add(w / tau, &batch.features.row(r));
            } else {
                g_r.scaled_add(w / tau, &ctx.perturbed.vectors.row(c - b));
            }
        }
        for &c in &pos_cols {
            if c < b {
                g_r.scaled_add(-inv_p / tau, &batch.features.row(c));
                grad.row_mut(c).scaled_add(-inv_p / tau, &batch.features.row(r));
            } else {
                g_r.scaled_add(-inv_p / tau, &ctx.perturbed.vectors.row(c - b));
            }
        }
        g_r.scaled_add(-inv_p / tau, &ctx.targets.vectors.row(own_target));
        grad.row_mut(r).scaled_add(1.0, &g_r);
    }

    // --- unassigned-target anchors ---
    for &u in &ctx.assignment.unassigned {
        let own: Vec<usize> = ctx
            .perturbed
            .base_index
            .iter()
            .enumerate()
            .filter(|(_, &base)| base == u)
            .map(|(pq, _)| pq)
            .collect();
        if own.is_empty() {
            continue;
        }
        let anchor = ctx.targets.vectors.row(u);
        let z_sims = batch.features.dot(&anchor) / tau;
        let p_sims = if q > 0 {
            ctx.perturbed.vectors.dot(&anchor) / tau
        } else {
            Array1::zeros(0)
        };

        let mut m = z_sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (pq, &base) in ctx.perturbed.base_index.iter().enumerate() {
            if base != u {
                m = m.max(p_sims[pq]);
            }
        }
        let mut denom = 0.0;
        for r in 0..b {
            denom += (z_sims[r] - m).exp();
        }
        for (pq, &base) in ctx.perturbed.base_index.iter().enumerate() {
            if base != u {
                denom += (p_sims[pq] - m).exp();
            }
        }
        let log_denom = m + denom.ln();

        let inv_p = 1.0 / own.len() as f64;
        let pos_mean: f64 = own.iter().map(|&pq| p_sims[pq]).sum::<f64>() * inv_p;
        value += log_denom - pos_mean;
        anchor_count += 1;

        // only the batch rows in the denominator carry feature gradients
        for r in 0..b {
            let w = (z_sims[r] - m).exp() / denom;
            grad.row_mut(r).scaled_add(w / tau, &anchor);
        }
    }

    let scale = 1.0 / anchor_count as f64;
    value *= scale;
    grad *= scale;
    if !value.is_finite() {
        return Err(OrcoError::NumericalFailure {
            epoch: 0,
            context: "PSCL value is not finite".into(),
        });
    }
    Ok(LossResult { value, grad_features: grad, grad_aux: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{
        generate_random_targets, perturb_targets, PerturbDistribution, PerturbedTargets,
    };
    use crate::losses::{in_scope_targets, CeScope, PerturbScope};
    use crate::testutil::{assigned_state, fd_grad_features, max_rel_err, random_rotation, unit_rows};

    /// Independent reference for the no-perturbation reduction: SCL with the
    /// assigned target as one extra positive per anchor, denominator over the
    /// other batch rows only.
    fn scl_plus_target_reference(
        batch: &FeatureBatch,
        ctx: &ContrastiveContext,
        tau: f64,
    ) -> f64 {
        let b = batch.len();
        let mut total = 0.0;
        for i in 0..b {
            let zi = batch.features.row(i);
            let mut terms = Vec::new();
            for j in 0..b {
                if j != i {
                    terms.push(zi.dot(&batch.features.row(j)) / tau);
                }
            }
            let denom: f64 = terms.iter().map(|t| t.exp()).sum();
            let t = ctx.assignment.assigned[&batch.labels[i]];
            let mut pos = vec![zi.dot(&ctx.targets.vectors.row(t)) / tau];
            for j in 0..b {
                if j != i && batch.labels[j] == batch.labels[i] {
                    pos.push(zi.dot(&batch.features.row(j)) / tau);
                }
            }
            let mut anchor = 0.0;
            for p in &pos {
                anchor += -(p.exp() / denom).ln();
            }
            total += anchor / pos.len() as f64;
        }
        total / b as f64
    }

    fn small_batch(seed: u64) -> FeatureBatch {
        let rows = unit_rows(6, 8, seed);
        FeatureBatch::new(
            rows,
            vec![0, 0, 1, 1, 2, 2],
            vec![0, 1, 0, 1, 0, 1],
            vec![0, 0, 0, 0, 1, 1],
        )
        .unwrap()
    }

    #[test]
    fn rejects_labels_without_assignment() {
        let targets = generate_random_targets(4, 8, 1).unwrap();
        let state = assigned_state(&targets, &[vec![0, 1]]);
        let empty = PerturbedTargets::empty(8);
        let ctx = ContrastiveContext::new(
            &state,
            &targets,
            &empty,
            0.1,
            PerturbScope::IncrementalAndUnassigned,
            CeScope::All,
        )
        .unwrap();
        let batch = small_batch(3); // contains label 2, unassigned
        match pscl_loss(&batch, &ctx) {
            Err(OrcoError::UnassignedClass { class_id }) => assert_eq!(class_id, 2),
            other => panic!("expected unassigned-class error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_perturbations_with_active_distribution() {
        let targets = generate_random_targets(4, 8, 1).unwrap();
        let state = assigned_state(&targets, &[vec![0, 1], vec![2]]);
        let mut empty = PerturbedTargets::empty(8);
        empty.distribution = PerturbDistribution::Uniform;
        let ctx = ContrastiveContext::new(
            &state,
            &targets,
            &empty,
            0.1,
            PerturbScope::IncrementalAndUnassigned,
            CeScope::All,
        )
        .unwrap();
        let batch = small_batch(3);
        assert!(matches!(pscl_loss(&batch, &ctx), Err(OrcoError::Configuration(_))));
    }

    #[test]
    fn no_perturbations_and_no_unassigned_reduces_to_scl_with_extra_positive() {
        // all 3 targets assigned, no perturbations: each anchor gains exactly
        // one extra positive (its target) and no extra negatives.
        let targets = generate_random_targets(3, 8, 5).unwrap();
        let state = assigned_state(&targets, &[vec![0, 1], vec![2]]);
        let empty = PerturbedTargets::empty(8);
        let ctx = ContrastiveContext::new(
            &state,
            &targets,
            &empty,
            0.25,
            PerturbScope::IncrementalAndUnassigned,
            CeScope::All,
        )
        .unwrap();
        let batch = small_batch(7);
        let got = pscl_loss(&batch, &ctx).unwrap();
        let expected = scl_plus_target_reference(&batch, &ctx, 0.25);
        assert!((got.value - expected).abs() < 1e-12, "{} vs {expected}", got.value);
    }

    #[test]
    fn lambda_zero_draws_equal_exact_target_copies() {
        let targets = generate_random_targets(5, 8, 6).unwrap();
        let state = assigned_state(&targets, &[vec![0, 1], vec![2]]);
        let scope: Vec<usize> =
            in_scope_targets(&state, PerturbScope::IncrementalAndUnassigned).into_iter().collect();
        let drawn =
            perturb_targets(&targets, &scope, 0.0, PerturbDistribution::Uniform, 9, 1).unwrap();
        let mut copies = drawn.clone();
        for (r, &base) in drawn.base_index.iter().enumerate() {
            copies.vectors.row_mut(r).assign(&targets.vectors.row(base));
        }
        let batch = small_batch(11);
        let ctx_a = ContrastiveContext::new(
            &state,
            &targets,
            &drawn,
            0.2,
            PerturbScope::IncrementalAndUnassigned,
            CeScope::All,
        )
        .unwrap();
        let ctx_b = ContrastiveContext::new(
            &state,
            &targets,
            &copies,
            0.2,
            PerturbScope::IncrementalAndUnassigned,
            CeScope::All,
        )
        .unwrap();
        let a = pscl_loss(&batch, &ctx_a).unwrap();
        let b = pscl_loss(&batch, &ctx_b).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grad_features, b.grad_features);
    }

    #[test]
    fn grad_matches_finite_differences() {
        for seed in 0..5u64 {
            let targets = generate_random_targets(6, 8, 20 + seed).unwrap();
            let state = assigned_state(&targets, &[vec![0, 1], vec![2]]);
            let scope: Vec<usize> = in_scope_targets(&state, PerturbScope::IncrementalAndUnassigned)
                .into_iter()
                .collect();
            let pert = perturb_targets(
                &targets,
                &scope,
                1e-2,
                PerturbDistribution::Uniform,
                40 + seed,
                3,
            )
            .unwrap();
            let ctx = ContrastiveContext::new(
                &state,
                &targets,
                &pert,
                0.3,
                PerturbScope::IncrementalAndUnassigned,
                CeScope::All,
            )
            .unwrap();
            let batch = small_batch(60 + seed);
            let r = pscl_loss(&batch, &ctx).unwrap();
            let numeric =
                fd_grad_features(|b| pscl_loss(b, &ctx).unwrap().value, &batch, 1e-5);
            let err = max_rel_err(&r.grad_features, &numeric);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn joint_rotation_leaves_value_unchanged() {
        let targets = generate_random_targets(5, 6, 8).unwrap();
        let state = assigned_state(&targets, &[vec![0, 1], vec![2]]);
        let scope: Vec<usize> =
            in_scope_targets(&state, PerturbScope::IncrementalAndUnassigned).into_iter().collect();
        let pert =
            perturb_targets(&targets, &scope, 1e-2, PerturbDistribution::Gaussian, 3, 2).unwrap();
        let rows = unit_rows(6, 6, 14);
        let labels = vec![0, 0, 1, 1, 2, 2];
        let batch = FeatureBatch::new(rows.clone(), labels.clone(), vec![0; 6], vec![0; 6]).unwrap();
        let ctx = ContrastiveContext::new(
            &state,
            &targets,
            &pert,
            0.2,
            PerturbScope::IncrementalAndUnassigned,
            CeScope::All,
        )
        .unwrap();
        let base = pscl_loss(&batch, &ctx).unwrap().value;

        let rot = random_rotation(6, 4);
        let rtargets =
            crate::geometry::TargetSet::from_vectors(targets.vectors.dot(&rot), 0).unwrap();
        let mut rpert = pert.clone();
        rpert.vectors = pert.vectors.dot(&rot);
        let rbatch = FeatureBatch::new_unchecked(rows.dot(&rot), labels, vec![0; 6], vec![0; 6]);
        let rctx = ContrastiveContext::new(
            &state,
            &rtargets,
            &rpert,
            0.2,
            PerturbScope::IncrementalAndUnassigned,
            CeScope::All,
        )
        .unwrap();
        let rotated = pscl_loss(&rbatch, &rctx).unwrap().value;
        assert!((rotated - base).abs() < 1e-9);
    }
}
