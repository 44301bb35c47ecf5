//! Exact symbolic computation for representation varieties of surface groups.
//!
//! The library computes, for the families of upper-triangular groups `T_n`
//! (invertible diagonal), `T̃_n` (last diagonal entry 1) and unipotent groups
//! `U_n`:
//!
//! * virtual classes `[R_G(Σ_g)]` of the representation varieties
//!   `Hom(π₁(Σ_g), G)` in the Grothendieck ring of varieties, expressed as
//!   polynomials in the Lefschetz class `q = [A¹]` — either for a fixed genus
//!   or in closed form symbolic in the genus (via a TQFT whose matrix is
//!   assembled from conjugacy-class data of `T̃_n`);
//! * representation zeta functions `ζ_G(s)` over `F_q`, computed by exact
//!   Clifford-theory recursion on semidirect-product decompositions, and the
//!   point counts / E-polynomials they induce through the Frobenius formula;
//! * independent brute-force oracles over the finite fields with at most nine
//!   elements, used to cross-validate every symbolic result.
//!
//! All arithmetic is exact (arbitrary-precision integers); there is no
//! floating point anywhere in the engine.

pub mod classes;
pub mod elim;
pub mod oracle;
pub mod poly;
pub mod strata;
pub mod surface;
pub mod tqft;
pub mod zeta;

use thiserror::Error;

/// Unified error type for the engine.
///
/// The variants distinguish "the algorithm genuinely cannot decide this input"
/// (`AlgorithmFailure`) from resource exhaustion and from plain usage errors;
/// callers (in particular the CLI) map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// The stratification recursion reached its terminal "fail" step: no rule
    /// applies to the (canonicalized) sub-problem carried in the message.
    /// This is a mathematical outcome, not a bug; callers must propagate it.
    #[error("stratification algorithm failed on irreducible sub-problem: {0}")]
    AlgorithmFailure(String),
    /// A configured resource budget (recursion depth, node count, basis size,
    /// degree cap, enumeration size) was exceeded.
    #[error("resource budget exceeded: {0}")]
    ResourceBudget(String),
    /// Malformed textual input (polynomial DSL, JSON payloads).
    #[error("parse error: {0}")]
    Parse(String),
    /// Invalid argument or unsupported parameter combination.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// An internal consistency check failed; indicates a bug, never expected.
    #[error("internal consistency check failed: {0}")]
    Internal(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
