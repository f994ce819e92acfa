//! One error enum for the whole core crate.
//!
//! Numerical code fails in a small number of recurring ways (non-finite
//! values, dimension mismatches, domain violations, stalled iterations), so a
//! single enum with contextual payloads keeps call sites uniform and lets the
//! CLI map everything onto its exit-code policy in one place.

use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A primal evaluation produced NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// The reverse sweep hit a tape node recorded through the custom-op
    /// escape hatch, which has no registered adjoint rule.
    #[error("reverse sweep reached unregistered primitive (op id {op_id}, node {node})")]
    UnsupportedOp { op_id: u16, node: usize },

    /// Vector/matrix extents disagree.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    /// An input violates a documented precondition (ordering, positivity,
    /// unknown names, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// The adaptive reference solver exceeded its step budget.
    #[error("ODE solver stalled after {steps} steps at t = {t}")]
    SolverStalled { steps: usize, t: f64 },

    /// ODE state became non-finite during integration.
    #[error("non-finite ODE state at step {step}, t = {t}")]
    NonFiniteState { step: usize, t: f64 },

    /// Invalid fitting or evaluation configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Every importance weight underflowed to -inf.
    #[error("degenerate importance proposal: all {m} log-weights are -inf")]
    DegenerateProposal { m: usize },

    /// Laplace could not factor the negated Hessian even after diagonal
    /// boosts.
    #[error("indefinite Hessian in Laplace approximation for subject {subject}")]
    IndefiniteHessian { subject: String },

    /// Requested quadrature dimension is not supported.
    #[error("Gauss-Hermite quadrature supports 1 or 2 random effects, model has {dim}")]
    UnsupportedDimension { dim: usize },

    /// Model name not in the catalog.
    #[error("unknown model '{name}' (available: {available})")]
    UnknownModel { name: String, available: String },

    /// The prior covariance of the transformed random effects is not
    /// positive definite at the given population parameters.
    #[error("prior covariance not positive definite: {context}")]
    PriorCovariance { context: String },

    /// A closed-form computation was requested for a model that does not
    /// admit one.
    #[error("model '{name}' does not support {operation}")]
    UnsupportedModel { name: String, operation: String },
}

impl Error {
    /// True when the failure is specific to the evaluation point (solver
    /// blowup, non-positive-definite matrix, numeric overflow) rather than
    /// to the problem setup; such failures mean "this point is bad" and are
    /// recoverable by evaluating somewhere else.
    pub fn is_point_dependent(&self) -> bool {
        !matches!(
            self,
            Error::Dimension { .. }
                | Error::Config(_)
                | Error::Domain(_)
                | Error::UnknownModel { .. }
                | Error::UnsupportedModel { .. }
                | Error::UnsupportedDimension { .. }
                | Error::UnsupportedOp { .. }
        )
    }
}

impl Error {
    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn dimension(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
