//! Crate-wide error type.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong outside of plain I/O is a contract violation
/// of one of the numerical routines; the variants mirror those contracts.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Degenerate reaction coefficients (a1*a2 - b1*b2 = 0): no coexistence state.
    #[error("singular parameters: {0}")]
    SingularParameters(String),

    /// Continuation cannot start from an inadmissible homogeneous equilibrium.
    #[error("no admissible start: {0}")]
    NoStart(String),

    /// Newton corrector failed; the caller is expected to shrink the step.
    #[error("corrector did not converge within {max_iter} iterations (|G| = {residual:.3e})")]
    StepFailure { max_iter: usize, residual: f64 },

    /// Corrector converged far from its predictor: near a singular point
    /// the Newton iteration can slide onto a different solution curve, and
    /// such a point must not be accepted as a continuation step.
    #[error("corrector jumped off the curve ({dist:.3e} from the predictor, allowed {allowed:.3e})")]
    Jump { dist: f64, allowed: f64 },

    /// Bordered system singular beyond corank 1 (tangent undefined).
    #[error("degenerate point: {0}")]
    DegeneratePoint(String),

    #[error("invalid bracket: {0}")]
    InvalidBracket(String),

    /// Branch switching kept falling back onto the branch it started from.
    #[error("branch switching failed: {0}")]
    SwitchFailure(String),

    /// Time relaxation blew up.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Convergence-order fit requested with too few usable rows.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("linear solve failed: {0}")]
    Linear(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }
}
