//! Error type shared across the toolkit.

/// Failures surfaced by construction, optimization, and simulation routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A numerical evaluation produced NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// The (A, B) pair does not admit arbitrary pole placement.
    #[error("uncontrollable pair: controllability rank {rank} < {n}")]
    Uncontrollable { rank: usize, n: usize },

    /// Requested closed-loop poles violate the placement preconditions.
    #[error("bad pole set: {reason}")]
    BadPoles { reason: String },

    /// An eigenvalue iteration exhausted its iteration budget.
    #[error("eigenvalue computation failed to converge")]
    NoConvergence,

    /// The Riccati iteration failed or the closed loop is not Hurwitz.
    #[error("no stabilizing Riccati solution: {reason}")]
    NoStabilizingSolution { reason: String },

    /// No eigenvector subset has a full-rank projection onto the zero coordinates.
    #[error("degenerate projection: no eigenvector subset spans the zero coordinates")]
    DegenerateProjection,

    /// The constructed output lost its relative degree.
    #[error("relative degree lost: |p| = {p_abs:e} below tolerance")]
    RelativeDegreeLoss { p_abs: f64 },

    /// The input-decoupling term is too close to zero to invert.
    #[error("singular decoupling term {value:e} (tolerance {tol:e})")]
    SingularDecoupling { value: f64, tol: f64 },

    /// An optimization left the working region or produced a non-finite cost.
    #[error("optimization diverged: {reason}")]
    Diverged { reason: String },

    /// Training loss blew past the divergence guard.
    #[error("training diverged: loss {loss:e} exceeded 10x initial {initial:e}")]
    TrainingDiverged { loss: f64, initial: f64 },

    /// An envelope fit was requested on a signal that never rises above the floor.
    #[error("signal starts below the envelope-fit floor")]
    AllBelowFloor,

    /// A persisted model file does not match the expected format.
    #[error("model file parse error at line {line}: {reason}")]
    ModelFormat { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
