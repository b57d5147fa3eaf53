//! The contrastive loss family: SCL, SSCL, the pretrain mixture, PSCL,
//! cross-entropy to assigned targets, the feature orthogonality loss, and
//! their unit-weight combination. Every loss returns its value together with
//! the analytic gradient with respect to the input features; pseudo-targets
//! and their perturbations are constants.

mod ce;
mod contrastive;
mod orth;
mod pscl;

pub use ce::ce_loss;
pub use contrastive::{pretrain_loss, scl_loss, sscl_loss};
pub use orth::orth_loss;
pub use pscl::pscl_loss;

use std::collections::BTreeSet;

use ndarray::Array2;

use crate::error::{OrcoError, Result};
use crate::geometry::{PerturbDistribution, PerturbedTargets, TargetSet};
use crate::matching::AssignmentState;

/// A batch of unit-norm embeddings with labels, augmentation-view ids, and
/// session-of-origin tags.
///
/// View pairing is positional: the k-th row with `view_id = 0` pairs with the
/// k-th row with `view_id = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub features: Array2<f64>,
    pub labels: Vec<i64>,
    pub view_ids: Vec<u8>,
    /// 0 = base session, i = incremental session i.
    pub session_tags: Vec<u32>,
}

impl FeatureBatch {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<i64>,
        view_ids: Vec<u8>,
        session_tags: Vec<u32>,
    ) -> Result<Self> {
        let b = features.nrows();
        if b < 1 {
            return Err(OrcoError::InvalidArgument("batch must have at least one row".into()));
        }
        if labels.len() != b || view_ids.len() != b || session_tags.len() != b {
            return Err(OrcoError::InvalidArgument(format!(
                "batch fields disagree on length: {b} rows, {} labels, {} view ids, {} session tags",
                labels.len(),
                view_ids.len(),
                session_tags.len()
            )));
        }
        for (i, row) in features.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(OrcoError::InvalidArgument(format!(
                    "feature row {i} has norm {norm}, expected 1"
                )));
            }
        }
        for (i, v) in view_ids.iter().enumerate() {
            if *v > 1 {
                return Err(OrcoError::InvalidArgument(format!(
                    "view id at row {i} must be 0 or 1, got {v}"
                )));
            }
        }
        Ok(Self { features, labels, view_ids, session_tags })
    }

    /// Skip the unit-norm check. Meant for numerical experiments (finite
    /// differences move rows slightly off the sphere).
    pub fn new_unchecked(
        features: Array2<f64>,
        labels: Vec<i64>,
        view_ids: Vec<u8>,
        session_tags: Vec<u32>,
    ) -> Self {
        Self { features, labels, view_ids, session_tags }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Which targets receive perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbScope {
    /// Targets assigned to incremental classes, plus all unassigned targets.
    IncrementalAndUnassigned,
    /// Every assigned target, plus all unassigned targets.
    AllAssignedAndUnassigned,
}

/// Which samples (and class logits) the cross-entropy term covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeScope {
    /// Only incremental classes; base-session data does not contribute.
    IncrementalOnly,
    /// Every assigned class.
    All,
}

/// Everything the target-aware losses need besides the batch itself.
#[derive(Debug, Clone)]
pub struct ContrastiveContext<'a> {
    pub assignment: &'a AssignmentState,
    pub targets: &'a TargetSet,
    pub perturbed: &'a PerturbedTargets,
    pub tau: f64,
    pub perturb_scope: PerturbScope,
    pub ce_scope: CeScope,
}

impl<'a> ContrastiveContext<'a> {
    pub fn new(
        assignment: &'a AssignmentState,
        targets: &'a TargetSet,
        perturbed: &'a PerturbedTargets,
        tau: f64,
        perturb_scope: PerturbScope,
        ce_scope: CeScope,
    ) -> Result<Self> {
        if tau <= 0.0 {
            return Err(OrcoError::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        if !perturbed.is_empty() && perturbed.vectors.ncols() != targets.dim() {
            return Err(OrcoError::InvalidArgument(format!(
                "perturbed targets have dim {}, targets have dim {}",
                perturbed.vectors.ncols(),
                targets.dim()
            )));
        }
        let scope = in_scope_targets(assignment, perturb_scope);
        for &b in &perturbed.base_index {
            if b >= targets.count() {
                return Err(OrcoError::InvalidArgument(format!(
                    "perturbed base index {b} out of range"
                )));
            }
            if !scope.contains(&b) {
                return Err(OrcoError::InvalidArgument(format!(
                    "perturbed base index {b} is outside the perturbation scope"
                )));
            }
        }
        Ok(Self { assignment, targets, perturbed, tau, perturb_scope, ce_scope })
    }
}

/// Target indices eligible for perturbation under a scope.
pub fn in_scope_targets(assignment: &AssignmentState, scope: PerturbScope) -> BTreeSet<usize> {
    let mut set: BTreeSet<usize> = assignment.unassigned.iter().copied().collect();
    match scope {
        PerturbScope::IncrementalAndUnassigned => {
            for class in assignment.incremental_classes() {
                set.insert(assignment.assigned[&class]);
            }
        }
        PerturbScope::AllAssignedAndUnassigned => {
            set.extend(assignment.assigned.values().copied());
        }
    }
    set
}

/// A loss value plus its gradient with respect to the batch features.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad_features: Array2<f64>,
    /// Gradient with respect to trainable auxiliary inputs. Targets are fixed
    /// in this framework, so this stays `None`.
    pub grad_aux: Option<Array2<f64>>,
}

impl LossResult {
    fn zero(batch: &FeatureBatch) -> Self {
        Self {
            value: 0.0,
            grad_features: Array2::zeros(batch.features.raw_dim()),
            grad_aux: None,
        }
    }
}

/// On/off switches for the combined loss, used by ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrcoComponents {
    pub pscl: bool,
    pub ce: bool,
    pub orth: bool,
}

impl Default for OrcoComponents {
    fn default() -> Self {
        Self { pscl: true, ce: true, orth: true }
    }
}

/// The combined loss broken down by component.
#[derive(Debug, Clone)]
pub struct OrcoBreakdown {
    pub result: LossResult,
    pub pscl: f64,
    pub ce: f64,
    pub orth: f64,
}

/// Unit-weight sum of PSCL, cross-entropy, and orthogonality losses.
/// Disabled components contribute exactly zero to value and gradient.
pub fn orco_loss(
    batch: &FeatureBatch,
    ctx: &ContrastiveContext,
    tau_o: f64,
    components: OrcoComponents,
) -> Result<OrcoBreakdown> {
    let mut total = LossResult::zero(batch);
    let mut pscl_value = 0.0;
    let mut ce_value = 0.0;
    let mut orth_value = 0.0;
    if components.pscl {
        let r = pscl_loss(batch, ctx)?;
        pscl_value = r.value;
        total.value += r.value;
        total.grad_features += &r.grad_features;
    }
    if components.ce {
        let r = ce_loss(batch, ctx)?;
        ce_value = r.value;
        total.value += r.value;
        total.grad_features += &r.grad_features;
    }
    if components.orth {
        let r = orth_loss(batch, ctx, tau_o)?;
        orth_value = r.value;
        total.value += r.value;
        total.grad_features += &r.grad_features;
    }
    if !total.value.is_finite() {
        return Err(OrcoError::NumericalFailure {
            epoch: 0,
            context: "combined loss is not finite".into(),
        });
    }
    Ok(OrcoBreakdown { result: total, pscl: pscl_value, ce: ce_value, orth: orth_value })
}

/// Check a perturbation set against the spec of its companion scope: empty is
/// only legitimate for the no-perturbation pathway.
pub(crate) fn require_perturbations(ctx: &ContrastiveContext) -> Result<()> {
    if ctx.perturbed.is_empty() && ctx.perturbed.distribution != PerturbDistribution::None {
        return Err(OrcoError::Configuration(
            "perturbed targets must be non-empty unless the distribution is `none`".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_random_targets;
    use crate::matching::{assign_session, AssignmentStrategy, ClassMeans};
    use crate::testutil::{assigned_state, unit_rows};

    #[test]
    fn feature_batch_validates() {
        let rows = unit_rows(3, 4, 1);
        assert!(FeatureBatch::new(rows.clone(), vec![0, 1, 2], vec![0, 0, 1], vec![0; 3]).is_ok());
        assert!(FeatureBatch::new(rows.clone(), vec![0, 1], vec![0, 0, 1], vec![0; 3]).is_err());
        assert!(FeatureBatch::new(rows.clone(), vec![0, 1, 2], vec![0, 0, 2], vec![0; 3]).is_err());
        let mut bad = rows;
        bad[[0, 0]] += 0.1;
        assert!(FeatureBatch::new(bad, vec![0, 1, 2], vec![0, 0, 1], vec![0; 3]).is_err());
    }

    #[test]
    fn scope_sets_follow_assignment_history() {
        let targets = generate_random_targets(6, 8, 1).unwrap();
        let state = assigned_state(&targets, &[vec![0, 1], vec![2]]);
        // classes 0,1 are base (history record 0), class 2 incremental.
        let inc = in_scope_targets(&state, PerturbScope::IncrementalAndUnassigned);
        assert!(inc.contains(&state.assigned[&2]));
        assert!(!inc.contains(&state.assigned[&0]));
        assert_eq!(inc.len(), 1 + state.unassigned.len());
        let all = in_scope_targets(&state, PerturbScope::AllAssignedAndUnassigned);
        assert_eq!(all.len(), 6);
    }

    #[test]
    fn context_rejects_out_of_scope_perturbations() {
        let targets = generate_random_targets(4, 8, 2).unwrap();
        let state = assigned_state(&targets, &[vec![0, 1]]);
        let base_target = state.assigned[&0];
        let pert = crate::geometry::perturb_targets(
            &targets,
            &[base_target],
            1e-2,
            crate::geometry::PerturbDistribution::Uniform,
            3,
            1,
        )
        .unwrap();
        // base-assigned target is not in scope under IncrementalAndUnassigned
        assert!(ContrastiveContext::new(
            &state,
            &targets,
            &pert,
            0.1,
            PerturbScope::IncrementalAndUnassigned,
            CeScope::All,
        )
        .is_err());
        assert!(ContrastiveContext::new(
            &state,
            &targets,
            &pert,
            0.1,
            PerturbScope::AllAssignedAndUnassigned,
            CeScope::All,
        )
        .is_ok());
    }

    #[test]
    fn orco_is_additive_and_reduces_to_pscl() {
        let targets = generate_random_targets(5, 8, 3).unwrap();
        let state = assigned_state(&targets, &[vec![0, 1], vec![2]]);
        let rows = unit_rows(6, 8, 9);
        let batch = FeatureBatch::new(
            rows,
            vec![0, 0, 1, 1, 2, 2],
            vec![0, 1, 0, 1, 0, 1],
            vec![0, 0, 0, 0, 1, 1],
        )
        .unwrap();
        let scope: Vec<usize> =
            in_scope_targets(&state, PerturbScope::IncrementalAndUnassigned).into_iter().collect();
        let pert = crate::geometry::perturb_targets(
            &targets,
            &scope,
            1e-2,
            crate::geometry::PerturbDistribution::Uniform,
            7,
            2,
        )
        .unwrap();
        let ctx = ContrastiveContext::new(
            &state,
            &targets,
            &pert,
            0.1,
            PerturbScope::IncrementalAndUnassigned,
            CeScope::IncrementalOnly,
        )
        .unwrap();

        let full = orco_loss(&batch, &ctx, 1.0, OrcoComponents::default()).unwrap();
        let p = pscl_loss(&batch, &ctx).unwrap();
        let c = ce_loss(&batch, &ctx).unwrap();
        let o = orth_loss(&batch, &ctx, 1.0).unwrap();
        assert!((full.result.value - (p.value + c.value + o.value)).abs() < 1e-12);
        assert!((full.pscl - p.value).abs() < 1e-12);
        assert!((full.ce - c.value).abs() < 1e-12);
        assert!((full.orth - o.value).abs() < 1e-12);

        let only = OrcoComponents { pscl: true, ce: false, orth: false };
        let reduced = orco_loss(&batch, &ctx, 1.0, only).unwrap();
        assert_eq!(reduced.result.value, p.value);
        assert_eq!(reduced.result.grad_features, p.grad_features);
    }

    #[test]
    fn reassignment_scope_tracks_first_introduction() {
        // A class re-listed by a later reassignment record keeps its original
        // introduction session.
        let targets = generate_random_targets(4, 8, 11).unwrap();
        let mut state = crate::matching::AssignmentState::new(4);
        let m0 = ClassMeans {
            class_ids: vec![0],
            means: ndarray::stack![ndarray::Axis(0), targets.vectors.row(0)],
            sample_counts: vec![1],
        };
        state = assign_session(&state, &m0, &targets, AssignmentStrategy::Greedy, 0).unwrap();
        let m1 = ClassMeans {
            class_ids: vec![0, 1],
            means: ndarray::stack![
                ndarray::Axis(0),
                targets.vectors.row(0),
                targets.vectors.row(1)
            ],
            sample_counts: vec![1, 1],
        };
        state = assign_session(&state, &m1, &targets, AssignmentStrategy::Reassignment, 0).unwrap();
        assert_eq!(state.introduction_session(0), Some(0));
        assert_eq!(state.introduction_session(1), Some(1));
        assert_eq!(state.incremental_classes(), vec![1]);
    }
}
