//! Run configuration: the sectioned key = value manifest read by the CLI,
//! flag overrides, and the effective-config echo. Unknown sections or keys
//! are errors.

use std::path::PathBuf;

use crate::data::SyntheticSpec;
use crate::error::{OrcoError, Result};
use crate::geometry::PerturbDistribution;
use crate::losses::{CeScope, PerturbScope};
use crate::matching::AssignmentStrategy;
use crate::protocol::{ModelShape, PhaseConfig, SessionPlan};

/// Where the features come from. Exactly one source per run.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    File(PathBuf),
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub plan: SessionPlan,
    pub data: DataSource,
    pub shape: ModelShape,
    pub phase: PhaseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            plan: SessionPlan { base_classes: 10, sessions: 3, ways: 3, shots: 5 },
            data: DataSource::Synthetic(SyntheticSpec::default_benchmark()),
            shape: ModelShape::default(),
            phase: PhaseConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            if spec.num_classes < self.plan.total_classes() {
                return Err(OrcoError::Configuration(format!(
                    "synthetic data has {} classes, plan needs {}",
                    spec.num_classes,
                    self.plan.total_classes()
                )));
            }
            if spec.dim != self.shape.input_dim {
                return Err(OrcoError::Configuration(format!(
                    "synthetic dim {} does not match model input dim {}",
                    spec.dim, self.shape.input_dim
                )));
            }
        }
        Ok(())
    }
}

/// Parse a manifest on top of the defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut file_path: Option<PathBuf> = None;
    let mut source_kind: Option<String> = None;
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = strip_comment(raw).trim().to_string();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or(OrcoError::Parse {
                line: lineno,
                message: format!("unterminated section header `{line}`"),
            })?;
            section = name.trim().to_string();
            if !matches!(section.as_str(), "plan" | "data" | "model" | "phase") {
                return Err(OrcoError::Parse {
                    line: lineno,
                    message: format!("unknown section `{section}`"),
                });
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(OrcoError::Parse {
            line: lineno,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if section.is_empty() {
            return Err(OrcoError::Parse {
                line: lineno,
                message: format!("key `{key}` appears before any section header"),
            });
        }
        if section == "data" && key == "source" {
            source_kind = Some(value.to_string());
            continue;
        }
        if section == "data" && key == "path" {
            file_path = Some(PathBuf::from(value));
            continue;
        }
        apply_key(&mut cfg, &section, key, value, lineno)?;
    }
    resolve_source(&mut cfg, source_kind.as_deref(), file_path)?;
    Ok(cfg)
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn resolve_source(
    cfg: &mut RunConfig,
    source_kind: Option<&str>,
    file_path: Option<PathBuf>,
) -> Result<()> {
    match (source_kind, file_path) {
        (None, None) | (Some("synthetic"), None) => Ok(()),
        (Some("file"), Some(path)) => {
            cfg.data = DataSource::File(path);
            Ok(())
        }
        (Some("file"), None) => Err(OrcoError::Configuration(
            "data source `file` requires a `path` key".into(),
        )),
        (Some("synthetic"), Some(_)) | (None, Some(_)) => Err(OrcoError::Configuration(
            "a `path` is only valid with `source = file`".into(),
        )),
        (Some(other), _) => Err(OrcoError::Configuration(format!(
            "unknown data source `{other}` (expected synthetic or file)"
        ))),
    }
}

/// Apply one `section.key=value` override (the CLI `--set` flag).
pub fn apply_override(cfg: &mut RunConfig, spec: &str) -> Result<()> {
    let bad = || {
        OrcoError::Configuration(format!(
            "override `{spec}` must look like section.key=value"
        ))
    };
    let (path, value) = spec.split_once('=').ok_or_else(bad)?;
    let (section, key) = path.trim().split_once('.').ok_or_else(bad)?;
    if section == "data" && key == "source" {
        return Err(OrcoError::Configuration(
            "switch data sources in the config file, not via --set".into(),
        ));
    }
    if section == "data" && key == "path" {
        cfg.data = DataSource::File(PathBuf::from(value.trim()));
        return Ok(());
    }
    apply_key(cfg, section.trim(), key.trim(), value.trim(), 0)
}

fn apply_key(cfg: &mut RunConfig, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
    let unknown = || OrcoError::Parse {
        line,
        message: format!("unknown key `{key}` in section [{section}]"),
    };
    let bad_value = |what: &str| OrcoError::Parse {
        line,
        message: format!("bad {what} for `{section}.{key}`: `{value}`"),
    };
    let as_usize = || value.parse::<usize>().map_err(|_| bad_value("integer"));
    let as_u64 = || value.parse::<u64>().map_err(|_| bad_value("integer"));
    let as_f64 = || value.parse::<f64>().map_err(|_| bad_value("number"));
    let as_bool = || match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad_value("boolean")),
    };
    match section {
        "plan" => match key {
            "base_classes" => cfg.plan.base_classes = as_usize()?,
            "sessions" => cfg.plan.sessions = as_usize()?,
            "ways" => cfg.plan.ways = as_usize()?,
            "shots" => cfg.plan.shots = as_usize()?,
            _ => return Err(unknown()),
        },
        "data" => {
            let spec = match &mut cfg.data {
                DataSource::Synthetic(spec) => spec,
                DataSource::File(_) => {
                    return Err(OrcoError::Parse {
                        line,
                        message: format!(
                            "key `{key}` only applies to the synthetic source"
                        ),
                    })
                }
            };
            match key {
                "num_classes" => spec.num_classes = as_usize()?,
                "dim" => spec.dim = as_usize()?,
                "cluster_std" => spec.cluster_std = as_f64()?,
                "samples_per_class_train" => spec.samples_per_class_train = as_usize()?,
                "samples_per_class_val" => spec.samples_per_class_val = as_usize()?,
                "separation_deg" => spec.separation_deg = as_f64()?,
                "seed" => spec.seed = as_u64()?,
                _ => return Err(unknown()),
            }
        }
        "model" => match key {
            "input_dim" => cfg.shape.input_dim = as_usize()?,
            "encoder_widths" => {
                let widths: std::result::Result<Vec<usize>, _> =
                    value.split_whitespace().map(|t| t.parse::<usize>()).collect();
                cfg.shape.encoder_widths = widths.map_err(|_| bad_value("width list"))?;
            }
            "head_hidden" => cfg.shape.head_hidden = as_usize()?,
            "output_dim" => cfg.shape.output_dim = as_usize()?,
            _ => return Err(unknown()),
        },
        "phase" => match key {
            "alpha" => cfg.phase.alpha = as_f64()?,
            "tau" => cfg.phase.tau = as_f64()?,
            "tau_o" => cfg.phase.tau_o = as_f64()?,
            "lambda" => cfg.phase.lambda = as_f64()?,
            "epochs_phase1" => cfg.phase.epochs_phase1 = as_usize()?,
            "epochs_phase2" => cfg.phase.epochs_phase2 = as_usize()?,
            "epochs_phase3" => cfg.phase.epochs_phase3 = as_usize()?,
            "lr_phase1" => cfg.phase.lr_phase1 = as_f64()?,
            "lr_phase2" => cfg.phase.lr_phase2 = as_f64()?,
            "lr_phase3" => cfg.phase.lr_phase3 = as_f64()?,
            "momentum" => cfg.phase.momentum = as_f64()?,
            "warmup_frac" => cfg.phase.warmup_frac = as_f64()?,
            "perturb_distribution" => {
                cfg.phase.perturb_distribution = match value {
                    "uniform" => PerturbDistribution::Uniform,
                    "gaussian" => PerturbDistribution::Gaussian,
                    "none" => PerturbDistribution::None,
                    _ => return Err(bad_value("distribution")),
                }
            }
            "perturb_scope" => {
                cfg.phase.perturb_scope = match value {
                    "incremental-and-unassigned" => PerturbScope::IncrementalAndUnassigned,
                    "all-assigned-and-unassigned" => PerturbScope::AllAssignedAndUnassigned,
                    _ => return Err(bad_value("perturbation scope")),
                }
            }
            "ce_scope" => {
                cfg.phase.ce_scope = match value {
                    "incremental-only" => CeScope::IncrementalOnly,
                    "all" => CeScope::All,
                    _ => return Err(bad_value("cross-entropy scope")),
                }
            }
            "assignment_strategy" => {
                cfg.phase.assignment_strategy = match value {
                    "greedy" => AssignmentStrategy::Greedy,
                    "reassignment" => AssignmentStrategy::Reassignment,
                    "random" => AssignmentStrategy::Random,
                    _ => return Err(bad_value("assignment strategy")),
                }
            }
            "exemplars_per_class" => cfg.phase.exemplars_per_class = as_usize()?,
            "batch_size" => cfg.phase.batch_size = as_usize()?,
            "jitter_std" => cfg.phase.jitter_std = as_f64()?,
            "seed" => cfg.phase.seed = as_u64()?,
            "skip_pretrain" => cfg.phase.skip_pretrain = as_bool()?,
            "finetune_encoder" => cfg.phase.finetune_encoder = as_bool()?,
            "target_epochs" => cfg.phase.target_epochs = as_usize()?,
            "target_lr" => cfg.phase.target_lr = as_f64()?,
            "enable_pscl" => cfg.phase.enable_pscl = as_bool()?,
            "enable_ce" => cfg.phase.enable_ce = as_bool()?,
            "enable_orth" => cfg.phase.enable_orth = as_bool()?,
            _ => return Err(unknown()),
        },
        _ => {
            return Err(OrcoError::Parse {
                line,
                message: format!("unknown section `{section}`"),
            })
        }
    }
    Ok(())
}

/// Named loss-component ablations for the CLI.
pub fn apply_loss_ablation(cfg: &mut RunConfig, name: &str) -> Result<()> {
    let (pscl, ce, orth) = match name {
        "full" => (true, true, true),
        "ce-only" => (false, true, false),
        "ce-orth" => (false, true, true),
        "pscl-only" => (true, false, false),
        "pscl-orth" => (true, false, true),
        "pscl-ce" => (true, true, false),
        _ => {
            return Err(OrcoError::Configuration(format!(
                "unknown loss ablation `{name}` \
                 (full, ce-only, ce-orth, pscl-only, pscl-orth, pscl-ce)"
            )))
        }
    };
    cfg.phase.enable_pscl = pscl;
    cfg.phase.enable_ce = ce;
    cfg.phase.enable_orth = orth;
    Ok(())
}

/// Serialize the effective configuration (the manifest echo). Parsing the
/// echo reproduces the config exactly.
pub fn echo_config(cfg: &RunConfig) -> String {
    let mut out = String::new();
    out.push_str("[plan]\n");
    out.push_str(&format!("base_classes = {}\n", cfg.plan.base_classes));
    out.push_str(&format!("sessions = {}\n", cfg.plan.sessions));
    out.push_str(&format!("ways = {}\n", cfg.plan.ways));
    out.push_str(&format!("shots = {}\n", cfg.plan.shots));
    out.push_str("\n[data]\n");
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            out.push_str("source = synthetic\n");
            out.push_str(&format!("num_classes = {}\n", spec.num_classes));
            out.push_str(&format!("dim = {}\n", spec.dim));
            out.push_str(&format!("cluster_std = {}\n", spec.cluster_std));
            out.push_str(&format!(
                "samples_per_class_train = {}\n",
                spec.samples_per_class_train
            ));
            out.push_str(&format!("samples_per_class_val = {}\n", spec.samples_per_class_val));
            out.push_str(&format!("separation_deg = {}\n", spec.separation_deg));
            out.push_str(&format!("seed = {}\n", spec.seed));
        }
        DataSource::File(path) => {
            out.push_str("source = file\n");
            out.push_str(&format!("path = {}\n", path.display()));
        }
    }
    out.push_str("\n[model]\n");
    out.push_str(&format!("input_dim = {}\n", cfg.shape.input_dim));
    let widths: Vec<String> = cfg.shape.encoder_widths.iter().map(|w| w.to_string()).collect();
    out.push_str(&format!("encoder_widths = {}\n", widths.join(" ")));
    out.push_str(&format!("head_hidden = {}\n", cfg.shape.head_hidden));
    out.push_str(&format!("output_dim = {}\n", cfg.shape.output_dim));
    out.push_str("\n[phase]\n");
    let p = &cfg.phase;
    out.push_str(&format!("alpha = {}\n", p.alpha));
    out.push_str(&format!("tau = {}\n", p.tau));
    out.push_str(&format!("tau_o = {}\n", p.tau_o));
    out.push_str(&format!("lambda = {}\n", p.lambda));
    out.push_str(&format!("epochs_phase1 = {}\n", p.epochs_phase1));
    out.push_str(&format!("epochs_phase2 = {}\n", p.epochs_phase2));
    out.push_str(&format!("epochs_phase3 = {}\n", p.epochs_phase3));
    out.push_str(&format!("lr_phase1 = {}\n", p.lr_phase1));
    out.push_str(&format!("lr_phase2 = {}\n", p.lr_phase2));
    out.push_str(&format!("lr_phase3 = {}\n", p.lr_phase3));
    out.push_str(&format!("momentum = {}\n", p.momentum));
    out.push_str(&format!("warmup_frac = {}\n", p.warmup_frac));
    out.push_str(&format!("perturb_distribution = {}\n", p.perturb_distribution));
    let scope = match p.perturb_scope {
        PerturbScope::IncrementalAndUnassigned => "incremental-and-unassigned",
        PerturbScope::AllAssignedAndUnassigned => "all-assigned-and-unassigned",
    };
    out.push_str(&format!("perturb_scope = {scope}\n"));
    let ce = match p.ce_scope {
        CeScope::IncrementalOnly => "incremental-only",
        CeScope::All => "all",
    };
    out.push_str(&format!("ce_scope = {ce}\n"));
    out.push_str(&format!("assignment_strategy = {}\n", p.assignment_strategy));
    out.push_str(&format!("exemplars_per_class = {}\n", p.exemplars_per_class));
    out.push_str(&format!("batch_size = {}\n", p.batch_size));
    out.push_str(&format!("jitter_std = {}\n", p.jitter_std));
    out.push_str(&format!("seed = {}\n", p.seed));
    out.push_str(&format!("skip_pretrain = {}\n", p.skip_pretrain));
    out.push_str(&format!("finetune_encoder = {}\n", p.finetune_encoder));
    out.push_str(&format!("target_epochs = {}\n", p.target_epochs));
    out.push_str(&format!("target_lr = {}\n", p.target_lr));
    out.push_str(&format!("enable_pscl = {}\n", p.enable_pscl));
    out.push_str(&format!("enable_ce = {}\n", p.enable_ce));
    out.push_str(&format!("enable_orth = {}\n", p.enable_orth));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_echo_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let echo = echo_config(&cfg);
        let back = parse_config(&echo).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn keys_apply_and_unknown_keys_error() {
        let text = "[plan]\nbase_classes = 4\nsessions = 2\nways = 1\nshots = 3\n\
                    [phase]\nseed = 42\ntau = 0.2\nassignment_strategy = random\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.plan.base_classes, 4);
        assert_eq!(cfg.phase.seed, 42);
        assert_eq!(cfg.phase.assignment_strategy, AssignmentStrategy::Random);

        let err = parse_config("[phase]\nlearning_rate = 1\n");
        match err {
            Err(OrcoError::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("learning_rate"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_config("[nope]\nx = 1\n").is_err());
        assert!(parse_config("x = 1\n").is_err());
    }

    #[test]
    fn file_source_requires_path() {
        assert!(parse_config("[data]\nsource = file\n").is_err());
        let cfg = parse_config("[data]\nsource = file\npath = feats.txt\n").unwrap();
        assert_eq!(cfg.data, DataSource::File(PathBuf::from("feats.txt")));
        assert!(parse_config("[data]\npath = feats.txt\n").is_err());
    }

    #[test]
    fn overrides_apply_after_file_values() {
        let mut cfg = parse_config("[phase]\nseed = 1\n").unwrap();
        apply_override(&mut cfg, "phase.seed=99").unwrap();
        assert_eq!(cfg.phase.seed, 99);
        apply_override(&mut cfg, "plan.ways=7").unwrap();
        assert_eq!(cfg.plan.ways, 7);
        assert!(apply_override(&mut cfg, "phase.nope=1").is_err());
        assert!(apply_override(&mut cfg, "garbage").is_err());
    }

    #[test]
    fn loss_ablations_set_switches() {
        let mut cfg = RunConfig::default();
        apply_loss_ablation(&mut cfg, "ce-only").unwrap();
        assert!(!cfg.phase.enable_pscl && cfg.phase.enable_ce && !cfg.phase.enable_orth);
        apply_loss_ablation(&mut cfg, "pscl-ce").unwrap();
        assert!(cfg.phase.enable_pscl && cfg.phase.enable_ce && !cfg.phase.enable_orth);
        assert!(apply_loss_ablation(&mut cfg, "everything").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# leading comment\n\n[plan]\nways = 2  # trailing comment\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.plan.ways, 2);
    }
}
