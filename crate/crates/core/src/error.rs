//! Error type shared by every module of the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, OrcoError>;

/// All failure modes surfaced by the library.
#[derive(Debug)]
pub enum OrcoError {
    /// A caller-supplied argument violates a precondition.
    InvalidArgument(String),
    /// A pool (targets, classes, samples) is too small for the request.
    Capacity(String),
    /// A batch or run configuration is unusable (e.g. a contrastive anchor
    /// set with no positives anywhere).
    Configuration(String),
    /// A class mean collapsed to (near) zero norm and cannot live on the sphere.
    DegenerateMean { class_id: i64 },
    /// A batch label has no assigned pseudo-target.
    UnassignedClass { class_id: i64 },
    /// A loss was asked to average over an empty contributing set.
    EmptyScope(String),
    /// A cached activation no longer matches the model it came from.
    InvalidState(String),
    /// A non-finite value appeared during iterative optimization.
    NumericalFailure { epoch: usize, context: String },
    /// The learning-rate schedule has no steps left.
    ScheduleExhausted { step: usize, total: usize },
    /// Rejection sampling could not satisfy a geometric constraint.
    GenerationFailure(String),
    /// A serialized artifact could not be parsed.
    Parse { line: usize, message: String },
    Io(std::io::Error),
}

impl fmt::Display for OrcoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrcoError::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            OrcoError::Capacity(m) => write!(f, "capacity error: {m}"),
            OrcoError::Configuration(m) => write!(f, "configuration error: {m}"),
            OrcoError::DegenerateMean { class_id } => {
                write!(f, "degenerate mean: class {class_id} averages to (near) zero norm")
            }
            OrcoError::UnassignedClass { class_id } => {
                write!(f, "class {class_id} has no assigned pseudo-target")
            }
            OrcoError::EmptyScope(m) => write!(f, "empty scope: {m}"),
            OrcoError::InvalidState(m) => write!(f, "invalid state: {m}"),
            OrcoError::NumericalFailure { epoch, context } => {
                write!(f, "numerical failure at epoch {epoch}: {context}")
            }
            OrcoError::ScheduleExhausted { step, total } => {
                write!(f, "schedule exhausted: step {step} of {total}")
            }
            OrcoError::GenerationFailure(m) => write!(f, "generation failure: {m}"),
            OrcoError::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            OrcoError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for OrcoError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            OrcoError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for OrcoError {
    fn from(e: std::io::Error) -> Self {
        OrcoError::Io(e)
    }
}
