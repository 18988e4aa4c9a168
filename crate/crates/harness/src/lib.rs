//! Workload generation, differential replay against a sorted-set oracle,
//! and I/O metrics for the deamortized tree and the amortized baseline.

pub mod engine;
pub mod replay;
pub mod report;
pub mod workload;

pub use engine::{Engine, EngineKind, OpCost};
pub use replay::{replay, Outcome, Replayer, RunConfig};
pub use report::{digest, CsvSink, MetricsRecord, Summary};
pub use workload::{generate, GenKind, Op};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invariant violation at op {index}: {}", details.join("; "))]
    Violation { index: u64, details: Vec<String> },
    #[error("oracle mismatch at op {index} ({op}): expected {expected}, got {got}")]
    Mismatch {
        index: u64,
        op: String,
        expected: String,
        got: String,
    },
    #[error(transparent)]
    Core(#[from] betree_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// 1 for usage and I/O problems, 2 for invariant breaches (including
    /// integrity failures inside the engine), 3 for oracle mismatches.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Io(_) | HarnessError::Csv(_) => 1,
            HarnessError::Violation { .. } | HarnessError::Core(_) => 2,
            HarnessError::Mismatch { .. } => 3,
        }
    }
}
