//! Desk-scale laboratory for robust modular sequence modeling.
//!
//! A set of frozen expert sequence models is combined through a gate that
//! carries a global normalization constraint, so the gated mixture is itself
//! a probability distribution. The crate provides:
//!
//! - exact divergence primitives over enumerated sequence supports ([`dist`]),
//! - order-1 Markov experts with exact log-likelihoods ([`experts`]),
//! - tabular and featurized gates with Euclidean projection onto the
//!   normalized gate space ([`gates`]),
//! - the closed-form optimal gate for a fixed mixture ([`fixedopt`]),
//! - minimax solvers for the worst-case-mixture game: exact no-regret
//!   dynamics and a stochastic primal-dual loop ([`solver`]),
//! - SIR and exact rejection sampling from the non-causal gated model
//!   ([`sampler`]),
//! - distillation into a causal per-step router, including the exact
//!   posterior-mean router and the chain-rule error decomposition
//!   ([`distill`]),
//! - every computable bound and identity used to audit the above
//!   ([`analysis`]),
//! - a CLI harness reproducing the synthetic experiments ([`harness`]).
//!
//! Everything is deterministic given explicit seeds, and every divergence is
//! computed exactly over enumerable supports so tests can pin tight
//! tolerances.

pub mod analysis;
pub mod dist;
pub mod distill;
pub mod experts;
pub mod fixedopt;
pub mod gates;
pub mod harness;
pub mod sampler;
pub mod solver;

mod textio;

use thiserror::Error;

/// Probability-vector normalization tolerance at construction time.
pub const CONSTRUCT_TOL: f64 = 1e-12;
/// Normalization tolerance for vectors produced by arithmetic.
pub const ARITH_TOL: f64 = 1e-9;
/// Per-row simplex tolerance for tabular gates.
pub const GATE_ROW_TOL: f64 = 1e-10;
/// `|Z - 1|` tolerance for direct projection output.
pub const GATE_Z_PROJ_TOL: f64 = 1e-8;
/// `|Z - 1|` tolerance accepted from iterative solvers.
pub const GATE_Z_SOLVER_TOL: f64 = 1e-6;
/// Cap applied to infinite KL gains before adversary updates.
pub const GAIN_CAP: f64 = 50.0;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("distributions are defined on different supports")]
    SupportMismatch,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("vector does not sum to 1 (sum = {0})")]
    NotNormalized(f64),
    #[error("negative probability: {0}")]
    NegativeProbability(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("duplicate sequence in support")]
    DuplicateSequence,
    #[error("token id {token} out of range for vocabulary size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence length {got} does not match instance length {expected}")]
    BadSeqLen { expected: usize, got: usize },
    #[error("sequence not in the enumerated support")]
    OffSupport,
    #[error("infeasible instance: {0}")]
    Infeasible(String),
    #[error("prefix has zero mass under the teacher model")]
    ZeroMassPrefix,
    #[error("partition mass is zero")]
    ZeroMass,
    #[error("sampling budget exhausted after {trials} trials")]
    BudgetExhausted { trials: usize },
    #[error("non-finite loss encountered: {0}")]
    NonFiniteLoss(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
