//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. The CLI maps variants to
//! process exit codes: config problems exit 2, numerical divergence exits 3,
//! gradient-check failures exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SefError {
    /// Invalid configuration: bad field value, unknown key, inconsistent dims.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape mismatch; message carries both shapes and the call site.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    /// A forward op produced NaN or Inf. Names the producing op so divergence
    /// is attributable.
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },

    /// Domain violation (log of a non-positive value, sqrt of a negative, ...).
    #[error("domain error in {context}: {detail}")]
    Domain { context: String, detail: String },

    /// Tape misuse: backward on a non-scalar, repeated backward, unknown node.
    #[error("tape error: {0}")]
    Tape(String),

    /// Training aborted because the loss or an intermediate went non-finite.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    /// A finite-difference check exceeded tolerance.
    #[error("gradient check failed for `{group}`: max rel error {max_rel_err:.3e} > {tol:.3e}")]
    GradCheck {
        group: String,
        max_rel_err: f64,
        tol: f64,
    },

    /// Malformed binary artifact (scenario file, checkpoint).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SefError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        SefError::Shape {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn domain(context: impl Into<String>, detail: impl Into<String>) -> Self {
        SefError::Domain {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// Exit code for the CLI. 1 is the generic failure bucket.
    pub fn exit_code(&self) -> i32 {
        match self {
            SefError::Config(_) | SefError::Json(_) => 2,
            SefError::Divergence { .. } | SefError::NonFinite { .. } => 3,
            SefError::GradCheck { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, SefError>;
