use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate input in {op}: norm {norm:e} below epsilon")]
    Degenerate { op: &'static str, norm: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("parameter {index} of group '{group}' has no gradient")]
    MissingGradient { group: String, index: usize },

    #[error("optimizer step counter overflow")]
    StepOverflow,

    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("infeasible benchmark spec: {0}")]
    InfeasibleSpec(String),

    #[error("class {class} in domain {domain} has {count} samples, need at least 2")]
    ClassTooSmall { domain: usize, class: usize, count: usize },

    #[error("domain {0} has no training samples")]
    EmptyDomain(usize),

    #[error("training failed at iteration {iteration}: {reason}")]
    TrainingFailure { iteration: usize, reason: String },

    #[error("no domain prompt label for domain {0}")]
    MissingLabel(usize),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("task {task} (seed {seed}): {source}")]
    Task {
        task: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("ablation point {point}: {source}")]
    Grid {
        point: String,
        #[source]
        source: Box<Error>,
    },

    #[error("archive: {0}")]
    Archive(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    /// Attach protocol task context to an error.
    pub fn in_task(self, task: impl Into<String>, seed: u64) -> Self {
        Error::Task {
            task: task.into(),
            seed,
            source: Box::new(self),
        }
    }
}
