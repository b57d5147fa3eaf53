//! Supervised and self-supervised contrastive losses, plus their pretrain
//! mixture.
//!
//! Conventions shared by the whole family:
//! - anchors never appear in their own positive or negative sets;
//! - the denominator sums over the negative set only, which for these two
//!   losses is every other row of the batch (same-label rows included).

use ndarray::{Array1, Array2};

use crate::error::{OrcoError, Result};

use super::{FeatureBatch, LossResult};

/// Supervised contrastive loss: positives are the other same-label rows,
/// negatives are all other rows.
///
/// Rows whose label appears nowhere else serve as negatives only. If no row
/// at all has a positive partner the batch is unusable for SCL.
pub fn scl_loss(batch: &FeatureBatch, tau: f64) -> Result<LossResult> {
    if tau <= 0.0 {
        return Err(OrcoError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let b = batch.len();
    let sims = batch.features.dot(&batch.features.t()) / tau;

    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros(batch.features.raw_dim());
    let mut anchors = 0usize;
    for i in 0..b {
        let positives: Vec<usize> =
            (0..b).filter(|&j| j != i && batch.labels[j] == batch.labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        value += anchor_terms(batch, &sims, tau, i, &positives, &mut grad);
    }
    if anchors == 0 {
        return Err(OrcoError::Configuration(format!(
            "label {} has no positive partner in the batch (no anchor has one)",
            batch.labels[0]
        )));
    }
    let scale = 1.0 / anchors as f64;
    value *= scale;
    grad *= scale;
    Ok(LossResult { value, grad_features: grad, grad_aux: None })
}

/// Self-supervised contrastive loss: the paired augmentation view is the sole
/// positive, all other rows are negatives.
///
/// Pairing is positional: the k-th `view_id = 0` row pairs with the k-th
/// `view_id = 1` row, and paired rows must carry the same label.
pub fn sscl_loss(batch: &FeatureBatch, tau: f64) -> Result<LossResult> {
    if tau <= 0.0 {
        return Err(OrcoError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let partner = view_partners(batch)?;
    let b = batch.len();
    let sims = batch.features.dot(&batch.features.t()) / tau;

    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros(batch.features.raw_dim());
    for i in 0..b {
        value += anchor_terms(batch, &sims, tau, i, &[partner[i]], &mut grad);
    }
    let scale = 1.0 / b as f64;
    value *= scale;
    grad *= scale;
    Ok(LossResult { value, grad_features: grad, grad_aux: None })
}

/// `(1 - alpha) * SCL + alpha * SSCL`. The endpoints short-circuit so an
/// `alpha = 0` run is bit-identical to a pure SCL run.
pub fn pretrain_loss(batch: &FeatureBatch, alpha: f64, tau: f64) -> Result<LossResult> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(OrcoError::InvalidArgument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if alpha == 0.0 {
        return scl_loss(batch, tau);
    }
    if alpha == 1.0 {
        return sscl_loss(batch, tau);
    }
    let scl = scl_loss(batch, tau)?;
    let sscl = sscl_loss(batch, tau)?;
    let value = (1.0 - alpha) * scl.value + alpha * sscl.value;
    let grad = &scl.grad_features * (1.0 - alpha) + &sscl.grad_features * alpha;
    Ok(LossResult { value, grad_features: grad, grad_aux: None })
}

/// Per-anchor InfoNCE terms over within-batch candidates:
/// `log sum_{j != i} exp(s_ij) - (1/|P|) sum_{p in P} s_ip`,
/// with gradient contributions accumulated into `grad` (unscaled by the
/// anchor count; the caller divides).
fn anchor_terms(
    batch: &FeatureBatch,
    sims: &Array2<f64>,
    tau: f64,
    i: usize,
    positives: &[usize],
    grad: &mut Array2<f64>,
) -> f64 {
    let b = batch.len();
    let row = sims.row(i);
    let mut m = f64::NEG_INFINITY;
    for j in 0..b {
        if j != i {
            m = m.max(row[j]);
        }
    }
    let mut denom = 0.0;
    for j in 0..b {
        if j != i {
            denom += (row[j] - m).exp();
        }
    }
    let log_denom = m + denom.ln();

    let inv_p = 1.0 / positives.len() as f64;
    let mut pos_mean = 0.0;
    for &p in positives {
        pos_mean += row[p];
    }
    pos_mean *= inv_p;

    // gradient of log-denominator
    let mut g_i = Array1::<f64>::zeros(batch.features.ncols());
    for j in 0..b {
        if j == i {
            continue;
        }
        let w = (row[j] - m).exp() / denom;
        g_i.scaled_add(w / tau, &batch.features.row(j));
        grad.row_mut(j).scaled_add(w / tau, &batch.features.row(i));
    }
    // gradient of the positive mean
    for &p in positives {
        g_i.scaled_add(-inv_p / tau, &batch.features.row(p));
        grad.row_mut(p).scaled_add(-inv_p / tau, &batch.features.row(i));
    }
    grad.row_mut(i).scaled_add(1.0, &g_i);

    log_denom - pos_mean
}

/// Positional view pairing; errors on any row left without a partner.
fn view_partners(batch: &FeatureBatch) -> Result<Vec<usize>> {
    let v0: Vec<usize> = (0..batch.len()).filter(|&i| batch.view_ids[i] == 0).collect();
    let v1: Vec<usize> = (0..batch.len()).filter(|&i| batch.view_ids[i] == 1).collect();
    if v0.len() != v1.len() {
        return Err(OrcoError::InvalidArgument(format!(
            "unpaired views: {} rows with view 0 but {} with view 1",
            v0.len(),
            v1.len()
        )));
    }
    let mut partner = vec![usize::MAX; batch.len()];
    for (&a, &b) in v0.iter().zip(&v1) {
        if batch.labels[a] != batch.labels[b] {
            return Err(OrcoError::InvalidArgument(format!(
                "unpaired views: rows {a} and {b} pair positionally but carry labels {} and {}",
                batch.labels[a], batch.labels[b]
            )));
        }
        partner[a] = b;
        partner[b] = a;
    }
    Ok(partner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_grad_features, max_rel_err, random_rotation, unit_rows};
    use ndarray::array;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn scl_hand_value_two_identical_plus_orthogonal() {
        // anchors: the two label-0 rows; the label-1 row is negative-only.
        // per anchor: -log(e / (e + 1))
        let rows = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let batch = FeatureBatch::new(rows, vec![0, 0, 1], vec![0; 3], vec![0; 3]).unwrap();
        let r = scl_loss(&batch, 1.0).unwrap();
        let expected = -(E / (E + 1.0)).ln();
        assert!((r.value - expected).abs() < 1e-12, "value {}", r.value);
    }

    #[test]
    fn scl_errors_when_no_anchor_has_positives() {
        let rows = unit_rows(3, 4, 1);
        let batch = FeatureBatch::new(rows, vec![0, 1, 2], vec![0; 3], vec![0; 3]).unwrap();
        match scl_loss(&batch, 1.0) {
            Err(OrcoError::Configuration(msg)) => assert!(msg.contains("label 0")),
            other => panic!("expected configuration error, got {other:?}"),
        }
    }

    #[test]
    fn scl_grad_matches_finite_differences() {
        for seed in 0..6u64 {
            let rows = unit_rows(8, 6, seed);
            let labels = vec![0, 0, 1, 1, 2, 2, 2, 3];
            let batch = FeatureBatch::new(rows, labels, vec![0; 8], vec![0; 8]).unwrap();
            let r = scl_loss(&batch, 0.5).unwrap();
            let numeric =
                fd_grad_features(|b| scl_loss(b, 0.5).unwrap().value, &batch, 1e-5);
            let err = max_rel_err(&r.grad_features, &numeric);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn scl_is_rotation_invariant() {
        let rows = unit_rows(6, 5, 3);
        let labels = vec![0, 0, 1, 1, 2, 2];
        let batch = FeatureBatch::new(rows.clone(), labels.clone(), vec![0; 6], vec![0; 6]).unwrap();
        let base = scl_loss(&batch, 0.3).unwrap().value;
        let rot = random_rotation(5, 17);
        let rotated =
            FeatureBatch::new_unchecked(rows.dot(&rot), labels, vec![0; 6], vec![0; 6]);
        assert!((scl_loss(&rotated, 0.3).unwrap().value - base).abs() < 1e-9);
    }

    #[test]
    fn sscl_hand_value_two_self_paired_samples() {
        // two samples, each view pair identical to itself, orthogonal across
        // samples: per anchor -log(e / (e + 2))
        let rows = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let batch =
            FeatureBatch::new(rows, vec![0, 1, 0, 1], vec![0, 0, 1, 1], vec![0; 4]).unwrap();
        let r = sscl_loss(&batch, 1.0).unwrap();
        let expected = -(E / (E + 2.0)).ln();
        assert!((r.value - expected).abs() < 1e-12, "value {}", r.value);
    }

    #[test]
    fn sscl_near_zero_with_aligned_pair_and_distant_negatives() {
        // B = 4; negatives sit at cosine -1 <= -0.99 from each anchor.
        let rows = array![[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]];
        let batch =
            FeatureBatch::new(rows, vec![0, 1, 0, 1], vec![0, 0, 1, 1], vec![0; 4]).unwrap();
        let r = sscl_loss(&batch, 0.1).unwrap();
        assert!(r.value < 0.01, "value {}", r.value);
        assert!(r.value > 0.0);
    }

    #[test]
    fn sscl_rejects_unpaired_views() {
        let rows = unit_rows(3, 4, 2);
        let batch = FeatureBatch::new(rows, vec![0, 0, 1], vec![0, 1, 0], vec![0; 3]).unwrap();
        assert!(matches!(sscl_loss(&batch, 1.0), Err(OrcoError::InvalidArgument(_))));

        // positional pairing with mismatched labels
        let rows = unit_rows(4, 4, 3);
        let batch = FeatureBatch::new(rows, vec![0, 1, 1, 0], vec![0, 0, 1, 1], vec![0; 4]).unwrap();
        assert!(sscl_loss(&batch, 1.0).is_err());
    }

    #[test]
    fn sscl_grad_matches_finite_differences() {
        for seed in 0..6u64 {
            let rows = unit_rows(8, 5, 10 + seed);
            let labels = vec![0, 1, 2, 3, 0, 1, 2, 3];
            let views = vec![0, 0, 0, 0, 1, 1, 1, 1];
            let batch = FeatureBatch::new(rows, labels, views, vec![0; 8]).unwrap();
            let r = sscl_loss(&batch, 0.4).unwrap();
            let numeric =
                fd_grad_features(|b| sscl_loss(b, 0.4).unwrap().value, &batch, 1e-5);
            let err = max_rel_err(&r.grad_features, &numeric);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn pretrain_endpoints_and_midpoint() {
        let rows = unit_rows(8, 5, 4);
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let views = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let batch = FeatureBatch::new(rows, labels, views, vec![0; 8]).unwrap();
        let scl = scl_loss(&batch, 0.2).unwrap();
        let sscl = sscl_loss(&batch, 0.2).unwrap();

        let a0 = pretrain_loss(&batch, 0.0, 0.2).unwrap();
        assert_eq!(a0.value, scl.value);
        assert_eq!(a0.grad_features, scl.grad_features);

        let a1 = pretrain_loss(&batch, 1.0, 0.2).unwrap();
        assert_eq!(a1.value, sscl.value);
        assert_eq!(a1.grad_features, sscl.grad_features);

        let mid = pretrain_loss(&batch, 0.5, 0.2).unwrap();
        assert!((mid.value - 0.5 * (scl.value + sscl.value)).abs() < 1e-12);

        assert!(pretrain_loss(&batch, 1.5, 0.2).is_err());
    }
}
