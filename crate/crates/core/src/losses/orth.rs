//! Feature orthogonality loss: the target-generation energy applied to the
//! set O = {within-batch class means} ∪ {assigned targets of classes absent
//! from the batch} ∪ {unassigned targets}. Means are plain within-batch
//! averages (not renormalized); gradients reach the features through them.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{OrcoError, Result};
use crate::geometry::energy_and_grad;

use super::{ContrastiveContext, FeatureBatch, LossResult};

pub fn orth_loss(
    batch: &FeatureBatch,
    ctx: &ContrastiveContext,
    tau_o: f64,
) -> Result<LossResult> {
    if tau_o <= 0.0 {
        return Err(OrcoError::InvalidArgument(format!("tau_o must be positive, got {tau_o}")));
    }
    let dim = batch.dim();
    if dim != ctx.targets.dim() {
        return Err(OrcoError::InvalidArgument(format!(
            "batch dim {dim} does not match target dim {}",
            ctx.targets.dim()
        )));
    }

    // within-batch means, classes in ascending label order
    let mut per_class: BTreeMap<i64, (Vec<usize>, usize)> = BTreeMap::new();
    for (i, &label) in batch.labels.iter().enumerate() {
        let e = per_class.entry(label).or_insert_with(|| (Vec::new(), 0));
        e.0.push(i);
        e.1 += 1;
    }
    let batch_classes: Vec<i64> = per_class.keys().copied().collect();

    let absent_targets: Vec<usize> = ctx
        .assignment
        .assigned
        .iter()
        .filter(|(class, _)| !per_class.contains_key(class))
        .map(|(_, &t)| t)
        .collect();

    let n_means = batch_classes.len();
    let n_rows = n_means + absent_targets.len() + ctx.assignment.unassigned.len();
    let mut o = Array2::<f64>::zeros((n_rows, dim));
    for (m, class) in batch_classes.iter().enumerate() {
        let (rows, count) = &per_class[class];
        let inv = 1.0 / *count as f64;
        for &r in rows {
            o.row_mut(m).scaled_add(inv, &batch.features.row(r));
        }
    }
    for (k, &t) in absent_targets.iter().enumerate() {
        o.row_mut(n_means + k).assign(&ctx.targets.vectors.row(t));
    }
    for (k, &t) in ctx.assignment.unassigned.iter().enumerate() {
        o.row_mut(n_means + absent_targets.len() + k).assign(&ctx.targets.vectors.row(t));
    }

    let (value, grad_o) = energy_and_grad(&o, tau_o);
    if !value.is_finite() {
        return Err(OrcoError::NumericalFailure {
            epoch: 0,
            context: "orthogonality loss is not finite".into(),
        });
    }

    // chain rule through the means: d mean_c / d z_r = 1/n_c for rows of c
    let mut grad = Array2::<f64>::zeros(batch.features.raw_dim());
    for (m, class) in batch_classes.iter().enumerate() {
        let (rows, count) = &per_class[class];
        let inv = 1.0 / *count as f64;
        for &r in rows {
            grad.row_mut(r).scaled_add(inv, &grad_o.row(m));
        }
    }
    Ok(LossResult { value, grad_features: grad, grad_aux: None })
}
