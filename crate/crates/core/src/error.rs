use thiserror::Error;

/// Errors raised by the model, oracles and policies.
#[derive(Debug, Error)]
pub enum OmcsError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("record {index}: {reason}")]
    InvalidAgent { index: usize, reason: String },

    #[error("allocation has {got} decisions but the instance has {expected} agents")]
    Alignment { expected: usize, got: usize },

    #[error("allocation is infeasible: {0}")]
    InfeasibleAllocation(String),

    #[error("quota for class {class} cannot be met: {reason}")]
    InfeasibleQuota { class: usize, reason: String },

    #[error("quotas sum to {total} which exceeds the budget {budget}")]
    QuotaExceedsBudget { total: u64, budget: u64 },

    #[error("threshold solver failed: {0}")]
    Solver(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OmcsError>;
