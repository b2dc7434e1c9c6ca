//! Error taxonomy shared by every module of the toolkit.
//!
//! Errors fall into three categories that callers treat differently:
//!
//! * [`ErrorCategory::Config`] — the input itself is invalid (bad lags,
//!   mismatched dimensions, non-integer step counts, malformed files).
//! * [`ErrorCategory::Numeric`] — the input was well-formed but a numerical
//!   procedure broke down (NaN/overflow, winding counts that refuse to
//!   converge, fundamental solutions that have not decayed by the truncation
//!   horizon, a polynomial fit whose residual is too large).
//! * [`ErrorCategory::Assumption`] — the model violates a structural
//!   assumption the reduction relies on (no critical pair on the imaginary
//!   axis, extra unstable roots, a degenerate root, a quadratic forcing whose
//!   rotating average does not vanish, a stationary density that is not
//!   normalizable).
//!
//! The CLI maps the categories to distinct process exit codes so batch
//! drivers can tell "fix your config" apart from "the model is outside the
//! method's domain".

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification of an [`Error`], used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Invalid input: files, arguments, dimensions, step counts.
    Config,
    /// Numerical breakdown: NaN, non-convergence, unreached decay.
    Numeric,
    /// Violated model assumption: spectrum shape, centering, normalizability.
    Assumption,
}

impl std::fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ErrorCategory::Config => write!(f, "config"),
            ErrorCategory::Numeric => write!(f, "numeric"),
            ErrorCategory::Assumption => write!(f, "assumption"),
        }
    }
}

/// All failure modes of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, argument combination, or file content.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A precondition on an operation's arguments was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// A lag lies outside the history span covered by a segment or measure.
    #[error("lag {lag} lies outside the history span [{span_min}, 0]")]
    LagOutsideSpan { lag: f64, span_min: f64 },

    /// The delay is not an integer multiple of the integration step.
    #[error("delay span {span} is not an integer multiple of dt = {dt}")]
    NonIntegerStepCount { span: f64, dt: f64 },

    /// No characteristic root was found on the imaginary axis within
    /// tolerance; the model is not at the verge of oscillatory instability.
    #[error(
        "no critical root pair on the imaginary axis (closest candidate \
         {closest_re} + {closest_im}i)"
    )]
    NoCriticalPair { closest_re: f64, closest_im: f64 },

    /// The root census found roots other than the critical pair with
    /// non-negative real part inside the search window.
    #[error("census found {count} unexpected root(s) with non-negative real part: {roots:?}")]
    UnstableExtraRoots { count: usize, roots: Vec<(f64, f64)> },

    /// Zero is not a root of the characteristic equation (zero-root mode).
    #[error("characteristic equation has no root at zero (|det| = {det_abs})")]
    NoZeroRoot { det_abs: f64 },

    /// The critical root is not simple: the two smallest singular values of
    /// the characteristic matrix are not clearly separated.
    #[error("critical root is degenerate: singular value ratio {ratio} exceeds {threshold}")]
    DegenerateRoot { ratio: f64, threshold: f64 },

    /// The rotating period average of the quadratic forcing does not vanish,
    /// so the quadratic-correction formulas do not apply.
    #[error("quadratic forcing fails the rotating-average condition (residual {residual})")]
    CenteringViolated { residual: f64 },

    /// The stationary density does not exist for these coefficients (the
    /// shape parameter of the candidate density is not positive).
    #[error("stationary density is not normalizable (shape parameter {shape} <= 0)")]
    NotNormalizable { shape: f64 },

    /// Argument-principle winding counts failed to stabilize on the given
    /// window, usually because a root sits (numerically) on its boundary.
    #[error("root census failed to converge: {0}")]
    WindowTooSmall(String),

    /// A cached fundamental solution has not decayed below tolerance by the
    /// truncation horizon, so infinite-horizon integrals cannot be trusted.
    #[error(
        "stable fundamental solution has not decayed by the truncation \
         horizon (remaining relative magnitude {remaining:.3e}, tolerance {tolerance:.3e})"
    )]
    DecayNotReached { remaining: f64, tolerance: f64 },

    /// A computation produced NaN or +/- infinity.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    /// Probe values do not fit the expected polynomial structure.
    #[error(
        "polynomial fit residual {residual:.3e} exceeds tolerance {tolerance:.3e}; \
         the coefficient is not polynomial of the expected degree"
    )]
    FitResidual { residual: f64, tolerance: f64 },

    /// A computed quantity failed its accuracy check.
    #[error("{what}: residual {residual:.3e} exceeds bound {bound:.3e}")]
    ResidualTooLarge { what: String, residual: f64, bound: f64 },
}

impl Error {
    /// Category of the error, used by the CLI for exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_)
            | Error::Domain(_)
            | Error::LagOutsideSpan { .. }
            | Error::NonIntegerStepCount { .. } => ErrorCategory::Config,
            Error::WindowTooSmall(_)
            | Error::DecayNotReached { .. }
            | Error::NonFinite { .. }
            | Error::FitResidual { .. }
            | Error::ResidualTooLarge { .. } => ErrorCategory::Numeric,
            Error::NoCriticalPair { .. }
            | Error::UnstableExtraRoots { .. }
            | Error::NoZeroRoot { .. }
            | Error::DegenerateRoot { .. }
            | Error::CenteringViolated { .. }
            | Error::NotNormalizable { .. } => ErrorCategory::Assumption,
        }
    }
}
