//! Reduction of stochastic delay differential equations at the verge of
//! oscillatory instability to one-dimensional averaged stochastic
//! differential equations.
//!
//! A delay system `x'(t) = L0(x_t) + small perturbations` whose linear part
//! has a single simple root pair `+/- i omega_c` on the imaginary axis (all
//! other roots stable) concentrates, under weak noise and weak nonlinearity,
//! near the critical plane spanned by the rotating eigenmodes. This crate
//!
//! * locates and validates that spectral configuration ([`spectrum`]),
//! * computes the averaged drift and diffusion coefficients of the
//!   energy-like coordinate on the critical plane for white-noise, quadratic
//!   and bounded-noise perturbations ([`averaging`]),
//! * integrates both the full delay system and the reduced one-dimensional
//!   equation so the two can be compared pathwise and in distribution
//!   ([`simulator`], [`reduced`], [`stats`]).
//!
//! The central objects are [`model::MatrixLagMeasure`] (the linear delay
//! operator), [`model::PerturbedModel`] (the full stochastic system),
//! [`spectrum::SpectralData`] (critical eigendata) and
//! [`averaging::ReducedCoefficients`] (the drift/diffusion functions of the
//! reduced equation).

pub mod averaging;
pub mod error;
pub mod model;
pub mod reduced;
pub mod simulator;
pub mod spectrum;
pub mod stats;

pub use averaging::{
    AveragingParams, AveragingWorkspace, CenteringReport, DecayReport, DriftComponent, DriftPart,
    LevelPolynomial, LinearGeneralConstants, LinearWhiteConstants, QuadratureInfo,
    QuadraticCorrections, ReducedCoefficients, Representation, ZeroRootWorkspace,
};
pub use error::{Error, ErrorCategory, Result};
pub use model::{MatrixLagMeasure, NoiseKind, NoiseModel, PerturbedModel, Perturbation, PolyLagFunctional};
pub use reduced::{
    InvariantDensity, ReducedOutcome, ReducedPath, ReducedSDE, ThresholdShift,
};
pub use simulator::{HistorySegment, Trajectory};
pub use spectrum::{ScanConfig, SpectralData, ZeroRootData};
pub use stats::{BoxplotPoint, EmpiricalCdf, KsSummary};
