//! Synthetic Gaussian-cluster datasets, feature-space augmentation, FSCIL
//! partitioning, and the feature-file format.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{OrcoError, Result};
use crate::protocol::SessionPlan;
use crate::rng::{derive_seed, rng_from_seed};

/// Recipe for a synthetic dataset: class centers on the unit sphere with a
/// minimum pairwise angle, plus per-coordinate Gaussian sample noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub cluster_std: f64,
    pub samples_per_class_train: usize,
    pub samples_per_class_val: usize,
    /// Minimum pairwise center angle in degrees.
    pub separation_deg: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The desk benchmark: 19 classes (10 base + 3 sessions x 3-way).
    pub fn default_benchmark() -> Self {
        Self {
            num_classes: 19,
            dim: 64,
            cluster_std: 0.15,
            samples_per_class_train: 100,
            samples_per_class_val: 30,
            separation_deg: 25.0,
            seed: 1,
        }
    }
}

/// Raw feature vectors with class labels, split into train and validation.
/// Class ids are contiguous from 0 and every class appears in both splits.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub dim: usize,
    pub classes: Vec<i64>,
    pub train: Vec<(Vec<f64>, i64)>,
    pub val: Vec<(Vec<f64>, i64)>,
}

impl FeatureDataset {
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.classes.iter().enumerate() {
            if *c != i as i64 {
                return Err(OrcoError::InvalidArgument(format!(
                    "class ids must be contiguous from 0; position {i} holds {c}"
                )));
            }
        }
        for (name, split) in [("train", &self.train), ("val", &self.val)] {
            for (row, label) in split {
                if row.len() != self.dim {
                    return Err(OrcoError::InvalidArgument(format!(
                        "{name} row for class {label} has {} dims, expected {}",
                        row.len(),
                        self.dim
                    )));
                }
                if !self.classes.contains(label) {
                    return Err(OrcoError::InvalidArgument(format!(
                        "{name} row references unknown class {label}"
                    )));
                }
            }
        }
        for c in &self.classes {
            let in_train = self.train.iter().any(|(_, l)| l == c);
            let in_val = self.val.iter().any(|(_, l)| l == c);
            if !in_train || !in_val {
                return Err(OrcoError::InvalidArgument(format!(
                    "class {c} must appear in both splits"
                )));
            }
        }
        Ok(())
    }

    pub fn train_rows_of(&self, class: i64) -> Vec<&[f64]> {
        self.train.iter().filter(|(_, l)| *l == class).map(|(r, _)| r.as_slice()).collect()
    }

    pub fn val_rows_of(&self, class: i64) -> Vec<&[f64]> {
        self.val.iter().filter(|(_, l)| *l == class).map(|(r, _)| r.as_slice()).collect()
    }
}

/// Training rows for one FSCIL session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionData {
    pub session_index: usize,
    pub class_ids: Vec<i64>,
    pub rows: Vec<(Vec<f64>, i64)>,
}

/// Generate the synthetic dataset together with the class centers (handy for
/// oracle classifiers in tests).
pub fn generate_synthetic_with_centers(
    spec: &SyntheticSpec,
) -> Result<(FeatureDataset, Array2<f64>)> {
    if spec.num_classes < 2 {
        return Err(OrcoError::InvalidArgument("num_classes must be >= 2".into()));
    }
    if spec.dim < 2 {
        return Err(OrcoError::InvalidArgument("dim must be >= 2".into()));
    }
    if spec.cluster_std < 0.0 {
        return Err(OrcoError::InvalidArgument("cluster_std must be >= 0".into()));
    }
    if spec.samples_per_class_train == 0 || spec.samples_per_class_val == 0 {
        return Err(OrcoError::InvalidArgument("samples per class must be positive".into()));
    }
    let mut rng = rng_from_seed(spec.seed);
    let min_cos = spec.separation_deg.to_radians().cos();

    let mut centers = Array2::<f64>::zeros((spec.num_classes, spec.dim));
    let mut accepted = 0usize;
    let mut retries = 0usize;
    while accepted < spec.num_classes {
        let mut cand = vec![0.0f64; spec.dim];
        let mut norm2 = 0.0;
        for v in cand.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
            norm2 += *v * *v;
        }
        let norm = norm2.sqrt();
        if norm <= 1e-12 {
            continue;
        }
        for v in cand.iter_mut() {
            *v /= norm;
        }
        let ok = (0..accepted).all(|k| {
            let dot: f64 = (0..spec.dim).map(|j| centers[[k, j]] * cand[j]).sum();
            dot <= min_cos
        });
        if ok {
            for (j, v) in cand.iter().enumerate() {
                centers[[accepted, j]] = *v;
            }
            accepted += 1;
        } else {
            retries += 1;
            if retries > 10_000 {
                return Err(OrcoError::GenerationFailure(format!(
                    "could not place {} centers with {} degree separation in dim {} \
                     after 10000 retries",
                    spec.num_classes, spec.separation_deg, spec.dim
                )));
            }
        }
    }

    let mut train = Vec::with_capacity(spec.num_classes * spec.samples_per_class_train);
    let mut val = Vec::with_capacity(spec.num_classes * spec.samples_per_class_val);
    for class in 0..spec.num_classes {
        for (count, split) in [
            (spec.samples_per_class_train, &mut train),
            (spec.samples_per_class_val, &mut val),
        ] {
            for _ in 0..count {
                let mut row = vec![0.0f64; spec.dim];
                for (j, v) in row.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = centers[[class, j]] + spec.cluster_std * z;
                }
                split.push((row, class as i64));
            }
        }
    }
    let dataset = FeatureDataset {
        dim: spec.dim,
        classes: (0..spec.num_classes as i64).collect(),
        train,
        val,
    };
    dataset.validate()?;
    Ok((dataset, centers))
}

/// Synthetic Gaussian clusters on the sphere, deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    generate_synthetic_with_centers(spec).map(|(d, _)| d)
}

/// Per-coordinate Gaussian jitter followed by row renormalization;
/// `jitter_std = 0` is the exact identity.
pub fn augment_view(features: &Array2<f64>, jitter_std: f64, seed: u64) -> Result<Array2<f64>> {
    if jitter_std < 0.0 {
        return Err(OrcoError::InvalidArgument("jitter_std must be >= 0".into()));
    }
    if jitter_std == 0.0 {
        return Ok(features.clone());
    }
    let mut rng = rng_from_seed(seed);
    let mut out = features.clone();
    for mut row in out.rows_mut() {
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += jitter_std * z;
        }
        let norm = row.dot(&row).sqrt();
        if norm > 1e-12 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    Ok(out)
}

/// Split a dataset into FSCIL sessions: the base session takes all training
/// rows of classes `0..base_classes`; each later session takes the next
/// `ways` classes with exactly `shots` training rows each (seed-sampled).
pub fn partition_fscil(
    dataset: &FeatureDataset,
    plan: &SessionPlan,
    seed: u64,
) -> Result<Vec<SessionData>> {
    dataset.validate()?;
    plan.validate()?;
    let needed = plan.total_classes();
    if dataset.classes.len() < needed {
        return Err(OrcoError::Capacity(format!(
            "plan needs {needed} classes but the dataset has {}",
            dataset.classes.len()
        )));
    }
    let mut sessions = Vec::with_capacity(plan.sessions + 1);

    let base_ids: Vec<i64> = (0..plan.base_classes as i64).collect();
    let base_rows: Vec<(Vec<f64>, i64)> = dataset
        .train
        .iter()
        .filter(|(_, l)| (*l as usize) < plan.base_classes)
        .cloned()
        .collect();
    sessions.push(SessionData { session_index: 0, class_ids: base_ids, rows: base_rows });

    for s in 1..=plan.sessions {
        let first = plan.base_classes + (s - 1) * plan.ways;
        let class_ids: Vec<i64> = (first..first + plan.ways).map(|c| c as i64).collect();
        let mut rows = Vec::with_capacity(plan.ways * plan.shots);
        for &class in &class_ids {
            let mut indices: Vec<usize> = dataset
                .train
                .iter()
                .enumerate()
                .filter(|(_, (_, l))| *l == class)
                .map(|(i, _)| i)
                .collect();
            if indices.len() < plan.shots {
                return Err(OrcoError::Capacity(format!(
                    "class {class} has {} training rows, session {s} needs {}",
                    indices.len(),
                    plan.shots
                )));
            }
            let mut rng = rng_from_seed(derive_seed(seed, &[s as u64, class as u64]));
            indices.shuffle(&mut rng);
            for &i in indices.iter().take(plan.shots) {
                rows.push(dataset.train[i].clone());
            }
        }
        sessions.push(SessionData { session_index: s, class_ids, rows });
    }
    Ok(sessions)
}

/// Serialize to the feature-file text format.
pub fn write_feature_file(dataset: &FeatureDataset) -> String {
    let mut out = format!(
        "orco-features v1 dim={} classes={}\n",
        dataset.dim,
        dataset.classes.len()
    );
    for (name, split) in [("train", &dataset.train), ("val", &dataset.val)] {
        for (row, label) in split {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&format!("{name} {label} {}\n", cells.join(" ")));
        }
    }
    out
}

/// Parse the [`write_feature_file`] format.
pub fn parse_feature_file(text: &str) -> Result<FeatureDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or(OrcoError::Parse { line: 1, message: "empty feature file".into() })?;
    let bad1 = |m: &str| OrcoError::Parse { line: 1, message: m.to_string() };
    let mut parts = header.split_whitespace();
    if parts.next() != Some("orco-features") || parts.next() != Some("v1") {
        return Err(bad1("expected header `orco-features v1 dim=<d> classes=<c>`"));
    }
    let mut dim = None;
    let mut classes = None;
    for p in parts {
        if let Some(v) = p.strip_prefix("dim=") {
            dim = Some(v.parse::<usize>().map_err(|_| bad1("bad dim"))?);
        } else if let Some(v) = p.strip_prefix("classes=") {
            classes = Some(v.parse::<usize>().map_err(|_| bad1("bad classes"))?);
        } else {
            return Err(bad1(&format!("unknown header field `{p}`")));
        }
    }
    let dim = dim.ok_or_else(|| bad1("header missing dim"))?;
    let n_classes = classes.ok_or_else(|| bad1("header missing classes"))?;

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let mut toks = line.split_whitespace();
        let split = toks.next().unwrap();
        let label_tok = toks.next().ok_or(OrcoError::Parse {
            line: lineno,
            message: "row needs `<split> <class_id> <floats>`".into(),
        })?;
        let label: i64 = label_tok.parse().map_err(|_| OrcoError::Parse {
            line: lineno,
            message: format!("bad class id `{label_tok}`"),
        })?;
        let rest: Vec<&str> = toks.collect();
        let values = crate::geometry::parse_float_row(&rest.join(" "), lineno)?;
        if values.len() != dim {
            return Err(OrcoError::Parse {
                line: lineno,
                message: format!("expected {dim} feature columns, got {}", values.len()),
            });
        }
        match split {
            "train" => train.push((values, label)),
            "val" => val.push((values, label)),
            other => {
                return Err(OrcoError::Parse {
                    line: lineno,
                    message: format!("unknown split `{other}`"),
                })
            }
        }
    }
    let dataset = FeatureDataset {
        dim,
        classes: (0..n_classes as i64).collect(),
        train,
        val,
    };
    dataset.validate().map_err(|e| match e {
        OrcoError::InvalidArgument(m) => OrcoError::Parse { line: 1, message: m },
        other => other,
    })?;
    Ok(dataset)
}

/// Read and parse a feature file from disk.
pub fn load_feature_file(path: &std::path::Path) -> Result<FeatureDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_feature_file(&text)
}
