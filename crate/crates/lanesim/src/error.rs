//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    /// A trace line failed to parse; `line` is 1-based.
    #[error("trace parse error at line {line}: {msg}")]
    TraceParse { line: usize, msg: String },

    /// Input violated a documented precondition or format rule.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("duplicate job id {0}")]
    DuplicateJobId(u64),

    #[error("unknown catalog entry {name}_{batch}")]
    CatalogMiss { name: String, batch: String },

    /// Arithmetic input outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Job can never run on this GPU: persistent + ephemeral exceed capacity.
    #[error("job {job} is permanently unschedulable: needs {needed} bytes, capacity {capacity}")]
    Unschedulable { job: u64, needed: u64, capacity: u64 },

    #[error("unknown job id {0}")]
    UnknownJob(u64),

    /// An operation was invoked in a state its contract forbids.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("bad configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
