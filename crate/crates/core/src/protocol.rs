//! The three-phase FSCIL protocol: contrastive pretraining on the base
//! session, base alignment to generated pseudo-targets, and per-session
//! few-shot alignment with exemplar replay. Single-threaded, deterministic
//! per seed.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::data::{augment_view, partition_fscil, FeatureDataset, SessionData};
use crate::error::{OrcoError, Result};
use crate::geometry::{
    generate_random_targets, optimize_targets, perturb_targets, PerturbDistribution,
    PerturbedTargets, TargetSet,
};
use crate::losses::{
    orco_loss, pretrain_loss, CeScope, ContrastiveContext, FeatureBatch, LossResult,
    OrcoComponents, PerturbScope,
};
use crate::matching::{assign_session, class_means, AssignmentState, AssignmentStrategy};
use crate::metrics::{
    confusion_by_group, fp_inc_variants, harmonic_mean, nearest_target_classify, sim_cls,
    sim_cls_to_target, summarize, Diagnostics, RunSummary, SessionReport,
};
use crate::model::{
    optimizer_step, CosineWarmup, FreezePlan, OptimizerKind, OptimizerState, ProjectionModel,
};
use crate::rng::{derive_seed, rng_from_seed};

// seed-stream tags
const TAG_DATA: u64 = 1;
const TAG_MODEL: u64 = 2;
const TAG_TARGETS: u64 = 3;
const TAG_MEMORY: u64 = 4;
const TAG_PHASE1: u64 = 10;
const TAG_PHASE2: u64 = 11;
const TAG_PHASE3: u64 = 12;

/// Geometry of an M-session N-way K-shot task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionPlan {
    pub base_classes: usize,
    pub sessions: usize,
    pub ways: usize,
    pub shots: usize,
}

impl SessionPlan {
    pub fn total_classes(&self) -> usize {
        self.base_classes + self.sessions * self.ways
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_classes == 0 || self.ways == 0 || self.shots == 0 {
            return Err(OrcoError::InvalidArgument(
                "base_classes, ways, and shots must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Session group of a class id: 0 for base, i for the i-th increment.
    pub fn session_group(&self, class: i64) -> Result<usize> {
        if class < 0 || class as usize >= self.total_classes() {
            return Err(OrcoError::InvalidArgument(format!(
                "class {class} is outside the plan's {} classes",
                self.total_classes()
            )));
        }
        let c = class as usize;
        if c < self.base_classes {
            Ok(0)
        } else {
            Ok(1 + (c - self.base_classes) / self.ways)
        }
    }
}

/// Small per-class store of past samples (raw feature rows).
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarMemory {
    pub per_class: BTreeMap<i64, Vec<Vec<f64>>>,
    pub capacity_per_class: usize,
    pub seed: u64,
}

impl ExemplarMemory {
    pub fn new(capacity_per_class: usize, seed: u64) -> Self {
        Self { per_class: BTreeMap::new(), capacity_per_class, seed }
    }

    /// Keep up to `capacity_per_class` uniformly random rows of a new class.
    pub fn store_class(&mut self, class: i64, rows: &[Vec<f64>]) {
        if self.capacity_per_class == 0 {
            return;
        }
        let mut indices: Vec<usize> = (0..rows.len()).collect();
        let mut rng = rng_from_seed(derive_seed(self.seed, &[class as u64]));
        indices.shuffle(&mut rng);
        let kept: Vec<Vec<f64>> = indices
            .into_iter()
            .take(self.capacity_per_class)
            .map(|i| rows[i].clone())
            .collect();
        self.per_class.insert(class, kept);
    }

    /// All stored rows with their class labels.
    pub fn rows(&self) -> Vec<(Vec<f64>, i64)> {
        let mut out = Vec::new();
        for (class, rows) in &self.per_class {
            for r in rows {
                out.push((r.clone(), *class));
            }
        }
        out
    }

    pub fn stored_classes(&self) -> usize {
        self.per_class.len()
    }
}

/// Hyperparameters for one full run. Defaults follow the original recipe
/// where it gives values (epochs 10/100 for phases 2/3, lambda 1e-2, lr
/// 0.4/0.25/0.1, LARS in phase 1) and the desk benchmark elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub alpha: f64,
    pub tau: f64,
    pub tau_o: f64,
    pub lambda: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub epochs_phase3: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub lr_phase3: f64,
    pub momentum: f64,
    pub warmup_frac: f64,
    pub perturb_distribution: PerturbDistribution,
    pub perturb_scope: PerturbScope,
    pub ce_scope: CeScope,
    pub assignment_strategy: AssignmentStrategy,
    pub exemplars_per_class: usize,
    pub batch_size: usize,
    pub jitter_std: f64,
    pub seed: u64,
    pub skip_pretrain: bool,
    /// Unfreeze the encoder during phases 2 and 3 (ablation pathway).
    pub finetune_encoder: bool,
    /// Gradient-descent budget for pseudo-target generation; 0 keeps the raw
    /// random targets.
    pub target_epochs: usize,
    pub target_lr: f64,
    pub enable_pscl: bool,
    pub enable_ce: bool,
    pub enable_orth: bool,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 0.1,
            tau_o: 1.0,
            lambda: 1e-2,
            epochs_phase1: 30,
            epochs_phase2: 10,
            epochs_phase3: 100,
            lr_phase1: 0.4,
            lr_phase2: 0.25,
            lr_phase3: 0.1,
            momentum: 0.9,
            warmup_frac: 0.05,
            perturb_distribution: PerturbDistribution::Uniform,
            perturb_scope: PerturbScope::IncrementalAndUnassigned,
            ce_scope: CeScope::IncrementalOnly,
            assignment_strategy: AssignmentStrategy::Greedy,
            exemplars_per_class: 5,
            batch_size: 128,
            jitter_std: 0.05,
            seed: 1,
            skip_pretrain: false,
            finetune_encoder: false,
            target_epochs: 2000,
            target_lr: 1e-2,
            enable_pscl: true,
            enable_ce: true,
            enable_orth: true,
        }
    }
}

impl PhaseConfig {
    pub fn components(&self) -> OrcoComponents {
        OrcoComponents { pscl: self.enable_pscl, ce: self.enable_ce, orth: self.enable_orth }
    }

    fn phase23_freeze(&self) -> FreezePlan {
        FreezePlan { encoder_frozen: !self.finetune_encoder, head_frozen: false }
    }
}

/// Network shape; the spheres' dimension is `output_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub head_hidden: usize,
    pub output_dim: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self { input_dim: 64, encoder_widths: vec![64, 64], head_hidden: 128, output_dim: 16 }
    }
}

/// Normalized feature rows with labels and session tags: the working form of
/// raw data inside the protocol (everything lives on the unit sphere).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRows {
    pub features: Array2<f64>,
    pub labels: Vec<i64>,
    pub session_tags: Vec<u32>,
}

impl LabeledRows {
    /// Normalize raw rows onto the unit sphere.
    pub fn from_raw(rows: &[(Vec<f64>, i64)], session_tag_of: impl Fn(i64) -> u32) -> Result<Self> {
        if rows.is_empty() {
            return Err(OrcoError::InvalidArgument("no rows".into()));
        }
        let dim = rows[0].0.len();
        let mut features = Array2::<f64>::zeros((rows.len(), dim));
        let mut labels = Vec::with_capacity(rows.len());
        let mut tags = Vec::with_capacity(rows.len());
        for (i, (row, label)) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(OrcoError::InvalidArgument(format!(
                    "row {i} has {} dims, expected {dim}",
                    row.len()
                )));
            }
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(OrcoError::InvalidArgument(format!("row {i} has zero norm")));
            }
            for (j, v) in row.iter().enumerate() {
                features[[i, j]] = v / norm;
            }
            labels.push(*label);
            tags.push(session_tag_of(*label));
        }
        Ok(Self { features, labels, session_tags: tags })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_min_samples_per_class(data: &LabeledRows, min: usize) -> Result<()> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &l in &data.labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    for (class, count) in counts {
        if count < min {
            return Err(OrcoError::Configuration(format!(
                "class {class} has {count} samples, need at least {min}"
            )));
        }
    }
    Ok(())
}

/// Two jittered views of a chunk, stacked `[view0; view1]` so the positional
/// view pairing holds.
fn two_view_batch(
    data: &LabeledRows,
    indices: &[usize],
    jitter_std: f64,
    step_seed: u64,
) -> Result<FeatureBatch> {
    let dim = data.features.ncols();
    let mut chunk = Array2::<f64>::zeros((indices.len(), dim));
    for (r, &i) in indices.iter().enumerate() {
        chunk.row_mut(r).assign(&data.features.row(i));
    }
    let v0 = augment_view(&chunk, jitter_std, derive_seed(step_seed, &[0]))?;
    let v1 = augment_view(&chunk, jitter_std, derive_seed(step_seed, &[1]))?;
    let n = indices.len();
    let mut features = Array2::<f64>::zeros((2 * n, dim));
    features.slice_mut(ndarray::s![..n, ..]).assign(&v0);
    features.slice_mut(ndarray::s![n.., ..]).assign(&v1);
    let mut labels = Vec::with_capacity(2 * n);
    let mut tags = Vec::with_capacity(2 * n);
    let mut views = Vec::with_capacity(2 * n);
    for pass in 0..2u8 {
        for &i in indices {
            labels.push(data.labels[i]);
            tags.push(data.session_tags[i]);
            views.push(pass);
        }
    }
    FeatureBatch::new(features, labels, views, tags)
}

fn epoch_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(seed);
    order.shuffle(&mut rng);
    order
}

fn make_optimizer(
    kind: OptimizerKind,
    lr: f64,
    cfg: &PhaseConfig,
    epochs: usize,
    n_rows: usize,
    model: &ProjectionModel,
) -> Result<OptimizerState> {
    let batches = n_rows.div_ceil(cfg.batch_size.max(1));
    let total = (epochs * batches).max(1);
    let warmup = ((total as f64 * cfg.warmup_frac).round() as usize).min(total);
    OptimizerState::new(kind, lr, cfg.momentum, CosineWarmup { warmup_steps: warmup, total_steps: total }, model)
}

/// One gradient step: forward, loss on the projected features, backward,
/// optimizer update. Returns the loss value.
fn train_step<F>(
    model: &mut ProjectionModel,
    opt: &mut OptimizerState,
    freeze: &FreezePlan,
    inputs_batch: &FeatureBatch,
    loss_fn: F,
) -> Result<f64>
where
    F: FnOnce(&FeatureBatch) -> Result<LossResult>,
{
    let (outputs, cache) = model.forward(&inputs_batch.features, freeze)?;
    let out_batch = FeatureBatch::new_unchecked(
        outputs,
        inputs_batch.labels.clone(),
        inputs_batch.view_ids.clone(),
        inputs_batch.session_tags.clone(),
    );
    let loss = loss_fn(&out_batch)?;
    if !loss.value.is_finite() {
        return Err(OrcoError::NumericalFailure {
            epoch: opt.step_count,
            context: "training loss is not finite".into(),
        });
    }
    let grads = model.backward(&cache, &loss.grad_features)?;
    optimizer_step(opt, model, &grads, freeze)?;
    Ok(loss.value)
}

/// Phase 1: train encoder and head with the SCL/SSCL mixture on base data,
/// two augmentation views per sample, LARS optimizer. Returns the trained
/// model and the per-epoch loss trace.
pub fn phase1_pretrain(
    model: ProjectionModel,
    base: &LabeledRows,
    cfg: &PhaseConfig,
) -> Result<(ProjectionModel, Vec<f64>)> {
    check_min_samples_per_class(base, 2)?;
    if cfg.epochs_phase1 == 0 {
        return Ok((model, Vec::new()));
    }
    let mut model = model;
    let mut opt = make_optimizer(
        OptimizerKind::Lars,
        cfg.lr_phase1,
        cfg,
        cfg.epochs_phase1,
        base.len(),
        &model,
    )?;
    let freeze = FreezePlan::ALL_TRAINABLE;
    let phase_seed = derive_seed(cfg.seed, &[TAG_PHASE1]);
    let mut trace = Vec::with_capacity(cfg.epochs_phase1);
    for epoch in 0..cfg.epochs_phase1 {
        let order = epoch_order(base.len(), derive_seed(phase_seed, &[epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let step_seed = derive_seed(phase_seed, &[epoch as u64, step as u64, 7]);
            let batch = two_view_batch(base, chunk, cfg.jitter_std, step_seed)?;
            let value = train_step(&mut model, &mut opt, &freeze, &batch, |out| {
                pretrain_loss(out, cfg.alpha, cfg.tau)
            })?;
            epoch_loss += value;
            steps += 1;
        }
        trace.push(epoch_loss / steps as f64);
    }
    Ok((model, trace))
}

/// Class means of the data as seen through the model head.
fn means_through_model(model: &ProjectionModel, data: &LabeledRows) -> Result<crate::matching::ClassMeans> {
    let (outputs, _) = model.forward(&data.features, &FreezePlan::ALL_TRAINABLE)?;
    let batch = FeatureBatch::new_unchecked(
        outputs,
        data.labels.clone(),
        vec![0; data.len()],
        data.session_tags.clone(),
    );
    class_means(&batch)
}

fn build_perturbations(
    state: &AssignmentState,
    targets: &TargetSet,
    cfg: &PhaseConfig,
    rows_in_batch: usize,
    step_seed: u64,
) -> Result<PerturbedTargets> {
    if cfg.perturb_distribution == PerturbDistribution::None {
        return Ok(PerturbedTargets::empty(targets.dim()));
    }
    let scope: Vec<usize> =
        crate::losses::in_scope_targets(state, cfg.perturb_scope).into_iter().collect();
    if scope.is_empty() {
        return Ok(PerturbedTargets::empty(targets.dim()));
    }
    // oversample perturbations round-robin so their row count matches the
    // real batch row count
    let indices: Vec<usize> = (0..rows_in_batch).map(|k| scope[k % scope.len()]).collect();
    perturb_targets(targets, &indices, cfg.lambda, cfg.perturb_distribution, step_seed, 1)
}

/// Shared training loop for phases 2 and 3 (head alignment with the combined
/// loss). `ce_scope` differs between the phases.
fn align_phase(
    mut model: ProjectionModel,
    data: &LabeledRows,
    state: &AssignmentState,
    targets: &TargetSet,
    cfg: &PhaseConfig,
    epochs: usize,
    lr: f64,
    ce_scope: CeScope,
    phase_seed: u64,
) -> Result<(ProjectionModel, Vec<f64>)> {
    if epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let freeze = cfg.phase23_freeze();
    freeze.validate_for_training()?;
    let mut opt =
        make_optimizer(OptimizerKind::SgdMomentum, lr, cfg, epochs, data.len(), &model)?;
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = epoch_order(data.len(), derive_seed(phase_seed, &[epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let step_seed = derive_seed(phase_seed, &[epoch as u64, step as u64, 13]);
            let batch = two_view_batch(data, chunk, cfg.jitter_std, step_seed)?;
            let perturbed = build_perturbations(
                state,
                targets,
                cfg,
                batch.len(),
                derive_seed(step_seed, &[17]),
            )?;
            let value = train_step(&mut model, &mut opt, &freeze, &batch, |out| {
                let ctx = ContrastiveContext::new(
                    state,
                    targets,
                    &perturbed,
                    cfg.tau,
                    cfg.perturb_scope,
                    ce_scope,
                )?;
                orco_loss(out, &ctx, cfg.tau_o, cfg.components()).map(|b| b.result)
            })?;
            epoch_loss += value;
            steps += 1;
        }
        trace.push(epoch_loss / steps as f64);
    }
    Ok((model, trace))
}

/// Phase 2: Hungarian-assign all base classes to targets, then align the
/// head with the combined loss. Cross-entropy covers the base classes here
/// (they are the ones being aligned; later phases restrict it per config).
pub fn phase2_base_align(
    model: ProjectionModel,
    base: &LabeledRows,
    targets: &TargetSet,
    cfg: &PhaseConfig,
) -> Result<(ProjectionModel, AssignmentState, Vec<f64>)> {
    let means = means_through_model(&model, base)?;
    if targets.count() < means.class_ids.len() {
        return Err(OrcoError::Capacity(format!(
            "{} base classes but only {} targets",
            means.class_ids.len(),
            targets.count()
        )));
    }
    let state = assign_session(
        &AssignmentState::new(targets.count()),
        &means,
        targets,
        cfg.assignment_strategy,
        derive_seed(cfg.seed, &[TAG_PHASE2, 0]),
    )?;
    let (model, trace) = align_phase(
        model,
        base,
        &state,
        targets,
        cfg,
        cfg.epochs_phase2,
        cfg.lr_phase2,
        CeScope::All,
        derive_seed(cfg.seed, &[TAG_PHASE2]),
    )?;
    Ok((model, state, trace))
}

/// Phase 3 for one incremental session: join the new few-shot data with the
/// exemplar memory, assign the new classes to unassigned targets, align the
/// head, and refresh the memory with the new classes.
pub fn phase3_incremental(
    model: ProjectionModel,
    session: &SessionData,
    state: &AssignmentState,
    memory: &ExemplarMemory,
    targets: &TargetSet,
    cfg: &PhaseConfig,
    plan: &SessionPlan,
) -> Result<(ProjectionModel, AssignmentState, ExemplarMemory, Vec<f64>)> {
    let s = session.session_index;
    if s < 1 {
        return Err(OrcoError::InvalidArgument("incremental session index must be >= 1".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in &session.class_ids {
        if !seen.insert(*c) {
            return Err(OrcoError::InvalidArgument(format!(
                "class {c} appears twice in session {s}"
            )));
        }
    }
    if session.class_ids.len() != plan.ways {
        return Err(OrcoError::InvalidArgument(format!(
            "session {s} has {} classes, plan says {}",
            session.class_ids.len(),
            plan.ways
        )));
    }
    for &c in &session.class_ids {
        let count = session.rows.iter().filter(|(_, l)| *l == c).count();
        if count != plan.shots {
            return Err(OrcoError::InvalidArgument(format!(
                "class {c} has {count} shots, plan says {}",
                plan.shots
            )));
        }
    }
    if state.unassigned.len() < session.class_ids.len() {
        return Err(OrcoError::Capacity(format!(
            "session {s} brings {} classes but only {} targets remain",
            session.class_ids.len(),
            state.unassigned.len()
        )));
    }

    // joint set: new data plus stored exemplars
    let mut joint_raw: Vec<(Vec<f64>, i64)> = session.rows.clone();
    joint_raw.extend(memory.rows());
    let tag_of = |class: i64| plan.session_group(class).unwrap_or(0) as u32;
    let joint = LabeledRows::from_raw(&joint_raw, tag_of)?;

    // assignment: greedy and random match only the new classes; full
    // reassignment re-matches every class seen so far from joint means
    let next_state = match cfg.assignment_strategy {
        AssignmentStrategy::Reassignment => {
            let means = means_through_model(&model, &joint)?;
            assign_session(
                state,
                &means,
                targets,
                AssignmentStrategy::Reassignment,
                derive_seed(cfg.seed, &[TAG_PHASE3, s as u64]),
            )?
        }
        strategy => {
            let new_rows: Vec<(Vec<f64>, i64)> = session.rows.clone();
            let new_data = LabeledRows::from_raw(&new_rows, tag_of)?;
            let means = means_through_model(&model, &new_data)?;
            assign_session(
                state,
                &means,
                targets,
                strategy,
                derive_seed(cfg.seed, &[TAG_PHASE3, s as u64]),
            )?
        }
    };

    let (model, trace) = align_phase(
        model,
        &joint,
        &next_state,
        targets,
        cfg,
        cfg.epochs_phase3,
        cfg.lr_phase3,
        cfg.ce_scope,
        derive_seed(cfg.seed, &[TAG_PHASE3, s as u64, 1]),
    )?;

    let mut next_memory = memory.clone();
    for &class in &session.class_ids {
        let rows: Vec<Vec<f64>> = session
            .rows
            .iter()
            .filter(|(_, l)| *l == class)
            .map(|(r, _)| r.clone())
            .collect();
        next_memory.store_class(class, &rows);
    }
    Ok((model, next_state, next_memory, trace))
}

/// Evaluate on the validation rows of every class seen up to `session`.
pub fn evaluate_session(
    model: &ProjectionModel,
    state: &AssignmentState,
    targets: &TargetSet,
    dataset: &FeatureDataset,
    plan: &SessionPlan,
    session: usize,
) -> Result<SessionReport> {
    let seen = plan.base_classes + session * plan.ways;
    let rows: Vec<(Vec<f64>, i64)> = dataset
        .val
        .iter()
        .filter(|(_, l)| (*l as usize) < seen)
        .cloned()
        .collect();
    let tag_of = |class: i64| plan.session_group(class).unwrap_or(0) as u32;
    let data = LabeledRows::from_raw(&rows, tag_of)?;
    let (features, _) = model.forward(&data.features, &FreezePlan::ALL_TRAINABLE)?;
    let predictions = nearest_target_classify(&features, state, targets)?;

    let mut base_total = 0usize;
    let mut base_correct = 0usize;
    let mut inc_total = 0usize;
    let mut inc_correct = 0usize;
    let mut per_class: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    for ((&pred, &label), _) in predictions.iter().zip(&data.labels).zip(0..) {
        let correct = pred == label;
        let entry = per_class.entry(label).or_insert((0, 0));
        entry.1 += 1;
        if correct {
            entry.0 += 1;
        }
        if (label as usize) < plan.base_classes {
            base_total += 1;
            if correct {
                base_correct += 1;
            }
        } else {
            inc_total += 1;
            if correct {
                inc_correct += 1;
            }
        }
    }
    let acc_base = 100.0 * base_correct as f64 / base_total.max(1) as f64;
    let acc_inc = if inc_total > 0 {
        Some(100.0 * inc_correct as f64 / inc_total as f64)
    } else {
        None
    };
    let acc_overall =
        100.0 * (base_correct + inc_correct) as f64 / (base_total + inc_total) as f64;
    let hm = acc_inc.map(|inc| harmonic_mean(acc_base, inc));
    let per_class_acc: BTreeMap<i64, f64> = per_class
        .into_iter()
        .map(|(c, (ok, total))| (c, 100.0 * ok as f64 / total as f64))
        .collect();

    let base_set: std::collections::BTreeSet<i64> =
        (0..plan.base_classes as i64).collect();
    let (fp, fp_alt) = if inc_total > 0 {
        let (a, b) = fp_inc_variants(&predictions, &data.labels, &base_set)?;
        (Some(a), b)
    } else {
        (None, None)
    };
    let eval_batch = FeatureBatch::new_unchecked(
        features.clone(),
        data.labels.clone(),
        vec![0; data.len()],
        data.session_tags.clone(),
    );
    let means = class_means(&eval_batch)?;
    let sim = if means.class_ids.len() >= 2 { Some(sim_cls(&means)?) } else { None };
    let sim_to_target = if state.unassigned.is_empty() {
        None
    } else {
        Some(sim_cls_to_target(&features, state, targets)?)
    };

    Ok(SessionReport {
        session_index: session,
        acc_base,
        acc_inc,
        acc_overall,
        hm,
        per_class_acc,
        confusion_by_group: confusion_by_group(&predictions, &data.labels, plan)?,
        diagnostics: Diagnostics {
            fp_inc: fp,
            fp_inc_alt: fp_alt,
            sim_cls: sim,
            sim_cls_to_target: sim_to_target,
        },
    })
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reports: Vec<SessionReport>,
    pub summary: RunSummary,
    pub model: ProjectionModel,
    pub state: AssignmentState,
    pub targets: TargetSet,
    pub memory: ExemplarMemory,
    pub pretrain_trace: Vec<f64>,
    /// Encoder snapshot right after phase 2, for the frozen-backbone check.
    pub encoder_after_phase2: Vec<crate::model::Layer>,
}

/// Execute the full protocol: optional pretrain, target generation, base
/// alignment, then every incremental session with cumulative evaluation.
pub fn run_fscil(
    cfg: &PhaseConfig,
    shape: &ModelShape,
    plan: &SessionPlan,
    dataset: &FeatureDataset,
) -> Result<RunOutcome> {
    plan.validate()?;
    dataset.validate()?;
    if dataset.dim != shape.input_dim {
        return Err(OrcoError::InvalidArgument(format!(
            "dataset dim {} does not match model input dim {}",
            dataset.dim, shape.input_dim
        )));
    }
    let sessions = partition_fscil(dataset, plan, derive_seed(cfg.seed, &[TAG_DATA]))?;
    let tag_of = |class: i64| plan.session_group(class).unwrap_or(0) as u32;

    let mut model = ProjectionModel::new(
        shape.input_dim,
        &shape.encoder_widths,
        shape.head_hidden,
        shape.output_dim,
        derive_seed(cfg.seed, &[TAG_MODEL]),
    )?;

    let base = LabeledRows::from_raw(&sessions[0].rows, tag_of)?;
    let mut pretrain_trace = Vec::new();
    if !cfg.skip_pretrain {
        let (m, trace) = phase1_pretrain(model, &base, cfg)?;
        model = m;
        pretrain_trace = trace;
    }

    // pseudo-targets: |T| = C, optimized toward mutual orthogonality
    let count = plan.total_classes();
    let raw = generate_random_targets(count, shape.output_dim, derive_seed(cfg.seed, &[TAG_TARGETS]))?;
    let targets = if cfg.target_epochs > 0 {
        optimize_targets(&raw, cfg.target_lr, cfg.target_epochs, cfg.tau_o)?.targets
    } else {
        raw
    };

    let (m, mut state, _trace2) = phase2_base_align(model, &base, &targets, cfg)?;
    model = m;
    let encoder_after_phase2 = model.encoder.clone();

    let mut memory = ExemplarMemory::new(cfg.exemplars_per_class, derive_seed(cfg.seed, &[TAG_MEMORY]));
    for &class in &sessions[0].class_ids {
        let rows: Vec<Vec<f64>> = sessions[0]
            .rows
            .iter()
            .filter(|(_, l)| *l == class)
            .map(|(r, _)| r.clone())
            .collect();
        memory.store_class(class, &rows);
    }

    let mut reports = Vec::with_capacity(plan.sessions + 1);
    reports.push(evaluate_session(&model, &state, &targets, dataset, plan, 0)?);

    for s in 1..=plan.sessions {
        let (m, next_state, next_memory, _trace) = phase3_incremental(
            model,
            &sessions[s],
            &state,
            &memory,
            &targets,
            cfg,
            plan,
        )?;
        model = m;
        state = next_state;
        memory = next_memory;
        reports.push(evaluate_session(&model, &state, &targets, dataset, plan, s)?);
    }

    let summary = summarize(&reports)?;
    Ok(RunOutcome {
        reports,
        summary,
        model,
        state,
        targets,
        memory,
        pretrain_trace,
        encoder_after_phase2,
    })
}
