//! Evaluation: nearest-target classification, accuracy decompositions,
//! harmonic means, false-positive and similarity diagnostics, decay metrics,
//! session-group confusion matrices, and the CSV report formats.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

use crate::error::{OrcoError, Result};
use crate::geometry::TargetSet;
use crate::matching::{AssignmentState, ClassMeans};
use crate::protocol::SessionPlan;

/// Diagnostic values that are undefined in some sessions stay `None`
/// (e.g. no incremental classes yet, or no unassigned targets left).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// Chosen definition: % of incremental-truth samples predicted as a
    /// *different incremental* class; denominator = all incremental-truth.
    pub fp_inc: Option<f64>,
    /// Variant with base-predicted samples removed from the denominator.
    pub fp_inc_alt: Option<f64>,
    /// Mean pairwise cosine similarity between class means.
    pub sim_cls: Option<f64>,
    /// Mean cosine similarity between features and unassigned targets.
    pub sim_cls_to_target: Option<f64>,
}

/// Per-session evaluation results.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub session_index: usize,
    pub acc_base: f64,
    /// `None` for the base session (no incremental classes yet).
    pub acc_inc: Option<f64>,
    pub acc_overall: f64,
    /// Harmonic mean of base and incremental accuracy; `None` at session 0.
    pub hm: Option<f64>,
    pub per_class_acc: BTreeMap<i64, f64>,
    /// (sessions+1) x (sessions+1) counts: row = true group, col = predicted.
    pub confusion_by_group: Array2<u64>,
    pub diagnostics: Diagnostics,
}

/// Whole-run aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Mean harmonic mean over incremental sessions 1..=M.
    pub ahm: f64,
    /// Mean overall accuracy over all sessions 0..=M.
    pub aacc: f64,
    pub base_decay: f64,
    pub performance_decay: f64,
    /// Mean of the per-session feature-to-unassigned-target similarity over
    /// the sessions where it is defined.
    pub mean_sim_cls_to_target: Option<f64>,
}

/// Cosine-similarity argmax over assigned targets; ties break to the smallest
/// class id.
pub fn nearest_target_classify(
    features: &Array2<f64>,
    state: &AssignmentState,
    targets: &TargetSet,
) -> Result<Vec<i64>> {
    if state.assigned.is_empty() {
        return Err(OrcoError::InvalidState("no assigned targets to classify against".into()));
    }
    let mut predictions = Vec::with_capacity(features.nrows());
    for row in features.rows() {
        let mut best_class = i64::MIN;
        let mut best_sim = f64::NEG_INFINITY;
        for (&class, &target) in &state.assigned {
            let sim = row.dot(&targets.vectors.row(target));
            if sim > best_sim {
                best_sim = sim;
                best_class = class;
            }
        }
        predictions.push(best_class);
    }
    Ok(predictions)
}

/// `2ab / (a + b)`, with the double-zero limit defined as 0.
pub fn harmonic_mean(acc_base: f64, acc_inc: f64) -> f64 {
    if acc_base == 0.0 && acc_inc == 0.0 {
        return 0.0;
    }
    2.0 * acc_base * acc_inc / (acc_base + acc_inc)
}

/// Both false-positive-rate readings over incremental-truth samples:
/// the chosen one (denominator = all incremental-truth samples) and the
/// variant that drops base-predicted samples from the denominator (`None`
/// when that denominator is empty).
pub fn fp_inc_variants(
    predictions: &[i64],
    labels: &[i64],
    base_classes: &BTreeSet<i64>,
) -> Result<(f64, Option<f64>)> {
    if predictions.len() != labels.len() {
        return Err(OrcoError::InvalidArgument("predictions and labels differ in length".into()));
    }
    let mut inc_total = 0usize;
    let mut wrong_inc = 0usize;
    let mut predicted_inc = 0usize;
    for (&pred, &label) in predictions.iter().zip(labels) {
        if base_classes.contains(&label) {
            continue;
        }
        inc_total += 1;
        if !base_classes.contains(&pred) {
            predicted_inc += 1;
            if pred != label {
                wrong_inc += 1;
            }
        }
    }
    if inc_total == 0 {
        return Err(OrcoError::InvalidArgument(
            "no incremental-class samples in the evaluation set".into(),
        ));
    }
    let chosen = 100.0 * wrong_inc as f64 / inc_total as f64;
    let alt = if predicted_inc > 0 {
        Some(100.0 * wrong_inc as f64 / predicted_inc as f64)
    } else {
        None
    };
    Ok((chosen, alt))
}

/// The chosen false-positive definition only.
pub fn fp_inc(predictions: &[i64], labels: &[i64], base_classes: &BTreeSet<i64>) -> Result<f64> {
    fp_inc_variants(predictions, labels, base_classes).map(|(c, _)| c)
}

/// Mean cosine similarity over all unordered class-mean pairs.
pub fn sim_cls(means: &ClassMeans) -> Result<f64> {
    let n = means.class_ids.len();
    if n < 2 {
        return Err(OrcoError::InvalidArgument(format!(
            "need at least 2 classes for sim_cls, got {n}"
        )));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += means.means.row(i).dot(&means.means.row(j));
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Mean cosine similarity over all (feature, unassigned target) pairs.
pub fn sim_cls_to_target(
    features: &Array2<f64>,
    state: &AssignmentState,
    targets: &TargetSet,
) -> Result<f64> {
    if state.unassigned.is_empty() {
        return Err(OrcoError::InvalidArgument("no unassigned targets".into()));
    }
    if features.nrows() == 0 {
        return Err(OrcoError::InvalidArgument("no features".into()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for row in features.rows() {
        for &u in &state.unassigned {
            sum += row.dot(&targets.vectors.row(u));
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// `(base_decay, performance_decay)` between the first and last report.
pub fn decay_metrics(reports: &[SessionReport]) -> Result<(f64, f64)> {
    if reports.len() < 2 {
        return Err(OrcoError::InvalidArgument(format!(
            "need at least 2 reports for decay metrics, got {}",
            reports.len()
        )));
    }
    let first = &reports[0];
    let last = &reports[reports.len() - 1];
    Ok((first.acc_base - last.acc_base, first.acc_overall - last.acc_overall))
}

/// Session-group confusion counts: row = true group, column = predicted
/// group, where group 0 is the base session and group i the i-th increment.
pub fn confusion_by_group(
    predictions: &[i64],
    labels: &[i64],
    plan: &SessionPlan,
) -> Result<Array2<u64>> {
    if predictions.len() != labels.len() {
        return Err(OrcoError::InvalidArgument("predictions and labels differ in length".into()));
    }
    let groups = plan.sessions + 1;
    let mut matrix = Array2::<u64>::zeros((groups, groups));
    for (&pred, &label) in predictions.iter().zip(labels) {
        let r = plan.session_group(label)?;
        let c = plan.session_group(pred)?;
        matrix[[r, c]] += 1;
    }
    Ok(matrix)
}

/// Aggregate a full run.
pub fn summarize(reports: &[SessionReport]) -> Result<RunSummary> {
    if reports.is_empty() {
        return Err(OrcoError::InvalidArgument("no reports to summarize".into()));
    }
    let hms: Vec<f64> = reports.iter().filter_map(|r| r.hm).collect();
    let ahm = if hms.is_empty() { 0.0 } else { hms.iter().sum::<f64>() / hms.len() as f64 };
    let aacc = reports.iter().map(|r| r.acc_overall).sum::<f64>() / reports.len() as f64;
    let (base_decay, performance_decay) =
        if reports.len() >= 2 { decay_metrics(reports)? } else { (0.0, 0.0) };
    let sims: Vec<f64> = reports.iter().filter_map(|r| r.diagnostics.sim_cls_to_target).collect();
    let mean_sim = if sims.is_empty() {
        None
    } else {
        Some(sims.iter().sum::<f64>() / sims.len() as f64)
    };
    Ok(RunSummary { ahm, aacc, base_decay, performance_decay, mean_sim_cls_to_target: mean_sim })
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => "NA".to_string(),
    }
}

fn fmt_sim(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".to_string(),
    }
}

/// The per-run report CSV (one row per session, fixed column order).
pub fn report_csv(reports: &[SessionReport]) -> String {
    let mut out = String::from(
        "# fp_inc = percent of incremental-truth samples predicted as a different \
         incremental class; denominator = all incremental-truth samples\n",
    );
    out.push_str("session,acc_base,acc_inc,acc_overall,hm,fp_inc,sim_cls,sim_cls_to_target\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.session_index,
            fmt_pct(Some(r.acc_base)),
            fmt_pct(r.acc_inc),
            fmt_pct(Some(r.acc_overall)),
            fmt_pct(r.hm),
            fmt_pct(r.diagnostics.fp_inc),
            fmt_sim(r.diagnostics.sim_cls),
            fmt_sim(r.diagnostics.sim_cls_to_target),
        ));
    }
    out
}

/// One confusion CSV per session.
pub fn confusion_csv(report: &SessionReport) -> String {
    let groups = report.confusion_by_group.nrows();
    let mut out = String::from("group");
    for c in 0..groups {
        out.push_str(&format!(",pred_{c}"));
    }
    out.push('\n');
    for r in 0..groups {
        out.push_str(&r.to_string());
        for c in 0..groups {
            out.push_str(&format!(",{}", report.confusion_by_group[[r, c]]));
        }
        out.push('\n');
    }
    out
}

/// Plain-text run summary.
pub fn summary_text(summary: &RunSummary) -> String {
    format!(
        "ahm={:.2}\naacc={:.2}\nbase_decay={:.2}\nperformance_decay={:.2}\nmean_sim_cls_to_target={}\n",
        summary.ahm,
        summary.aacc,
        summary.base_decay,
        summary.performance_decay,
        fmt_sim(summary.mean_sim_cls_to_target),
    )
}
