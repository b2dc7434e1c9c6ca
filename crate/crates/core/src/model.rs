//! Model descriptions: linear lag measures, polynomial lag functionals and
//! noise processes.
//!
//! A delay system on the history space `C([-r, 0]; R^n)` is described here by
//!
//! * a [`MatrixLagMeasure`] — the linear part, a finite sum of matrix point
//!   masses `L0(seg) = sum_k A_k seg(theta_k)` with lags `theta_k <= 0`;
//! * optional [`PolyLagFunctional`]s — polynomial forcings evaluated on the
//!   segment values at finitely many lags, used for the deterministic and
//!   stochastic perturbations;
//! * a [`NoiseModel`] — the driving process for perturbations that are not
//!   white.
//!
//! Everything in this module is immutable after construction and free of
//! interior mutability, so models can be shared freely across threads.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::simulator::HistorySegment;

/// Relative tolerance used to decide whether two lags coincide.
const LAG_DISTINCT_TOL: f64 = 1e-12;

/// Finite sum of matrix point masses: `L0(seg) = sum_k A_k seg(theta_k)`.
///
/// The lags satisfy `-span <= theta_k <= 0`. The span is the history horizon
/// `r`; by default it is the largest delay, but a larger horizon can be
/// declared explicitly (useful for systems whose dynamics only read the
/// current value but which are still treated on a nontrivial history space).
#[derive(Debug, Clone)]
pub struct MatrixLagMeasure {
    n: usize,
    terms: Vec<(f64, DMatrix<f64>)>,
    span: f64,
}

impl MatrixLagMeasure {
    /// Builds a measure from `(lag, matrix)` terms.
    ///
    /// All matrices must be square of the same dimension, lags must be
    /// non-positive and pairwise distinct. When `declared_span` is `None`
    /// the span is the largest delay, which must then be positive.
    pub fn new(terms: Vec<(f64, DMatrix<f64>)>, declared_span: Option<f64>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Config("lag measure needs at least one term".into()));
        }
        let n = terms[0].1.nrows();
        for (lag, a) in &terms {
            if a.nrows() != n || a.ncols() != n {
                return Err(Error::Config(format!(
                    "lag measure matrices must all be {n}x{n}, found {}x{}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            if !lag.is_finite() || *lag > 0.0 {
                return Err(Error::Config(format!("lag {lag} must be finite and <= 0")));
            }
        }
        let max_delay = terms.iter().map(|(lag, _)| -lag).fold(0.0, f64::max);
        let span = match declared_span {
            Some(s) => {
                if !s.is_finite() || s <= 0.0 {
                    return Err(Error::Config(format!("declared span {s} must be positive")));
                }
                if s + LAG_DISTINCT_TOL < max_delay {
                    return Err(Error::Config(format!(
                        "declared span {s} is smaller than the largest delay {max_delay}"
                    )));
                }
                s
            }
            None => {
                if max_delay <= 0.0 {
                    return Err(Error::Config(
                        "a measure with only lag-0 terms needs an explicit span".into(),
                    ));
                }
                max_delay
            }
        };
        let scale = span.max(1.0);
        for i in 0..terms.len() {
            for j in (i + 1)..terms.len() {
                if (terms[i].0 - terms[j].0).abs() < LAG_DISTINCT_TOL * scale {
                    return Err(Error::Config(format!(
                        "duplicate lags {} and {} in measure",
                        terms[i].0, terms[j].0
                    )));
                }
            }
        }
        Ok(MatrixLagMeasure { n, terms, span })
    }

    /// State dimension `n`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// History horizon `r` (largest delay or the declared span).
    pub fn span(&self) -> f64 {
        self.span
    }

    /// The `(lag, matrix)` terms.
    pub fn terms(&self) -> &[(f64, DMatrix<f64>)] {
        &self.terms
    }

    /// Applies the measure to a history segment:
    /// `sum_k A_k seg(theta_k)`, reading segment values by linear
    /// interpolation (exact when a lag hits a grid node; the lag-0 value is
    /// the segment's value *at* zero, i.e. the jump value when one is set).
    pub fn eval_linear(&self, seg: &HistorySegment) -> Result<DVector<f64>> {
        if seg.n() != self.n {
            return Err(Error::Domain(format!(
                "segment dimension {} does not match measure dimension {}",
                seg.n(),
                self.n
            )));
        }
        let mut out = DVector::zeros(self.n);
        let mut value = vec![0.0; self.n];
        for (lag, a) in &self.terms {
            seg.eval_into(*lag, &mut value)?;
            for row in 0..self.n {
                let mut acc = 0.0;
                for col in 0..self.n {
                    acc += a[(row, col)] * value[col];
                }
                out[row] += acc;
            }
        }
        Ok(out)
    }
}

/// One monomial of a [`PolyLagFunctional`]: a coefficient vector times a
/// product of powers of the stacked lag variables.
#[derive(Debug, Clone)]
pub struct PolyTerm {
    /// Exponent of each stacked variable; length `n * lags.len()`.
    pub exponents: Vec<u32>,
    /// Output vector multiplying the monomial; length `n`.
    pub coeff: Vec<f64>,
}

/// Polynomial functional of finitely many segment values.
///
/// With lags `theta_1, ..., theta_m`, the functional evaluates the segment at
/// every lag, stacks the results into `u in R^(n*m)` with
/// `u[l*n + c] = seg_c(theta_l)`, and returns a polynomial `R^(n*m) -> R^n`
/// given as a sum of monomial terms.
///
/// Directional derivatives are computed analytically from the monomial
/// structure, never by finite differences.
#[derive(Debug, Clone)]
pub struct PolyLagFunctional {
    n: usize,
    lags: Vec<f64>,
    terms: Vec<PolyTerm>,
}

impl PolyLagFunctional {
    /// Builds a functional from explicit monomial terms.
    pub fn new(n: usize, lags: Vec<f64>, terms: Vec<PolyTerm>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("functional dimension must be positive".into()));
        }
        for lag in &lags {
            if !lag.is_finite() || *lag > 0.0 {
                return Err(Error::Config(format!(
                    "functional lag {lag} must be finite and <= 0"
                )));
            }
        }
        let vars = n * lags.len();
        for term in &terms {
            if term.exponents.len() != vars {
                return Err(Error::Config(format!(
                    "term exponent list has length {}, expected {} (n * number of lags)",
                    term.exponents.len(),
                    vars
                )));
            }
            if term.coeff.len() != n {
                return Err(Error::Config(format!(
                    "term coefficient vector has length {}, expected {}",
                    term.coeff.len(),
                    n
                )));
            }
        }
        for i in 0..terms.len() {
            for j in (i + 1)..terms.len() {
                if terms[i].exponents == terms[j].exponents {
                    return Err(Error::Config(format!(
                        "duplicate monomial {:?} in functional",
                        terms[i].exponents
                    )));
                }
            }
        }
        Ok(PolyLagFunctional { n, lags, terms })
    }

    /// Constant functional (no lag reads).
    pub fn constant(value: Vec<f64>) -> Result<Self> {
        let n = value.len();
        PolyLagFunctional::new(
            n,
            Vec::new(),
            vec![PolyTerm { exponents: Vec::new(), coeff: value }],
        )
    }

    /// Linear functional `seg -> sum_k B_k seg(lag_k)`.
    pub fn linear(terms: &[(f64, DMatrix<f64>)]) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Config("linear functional needs at least one term".into()));
        }
        let n = terms[0].1.nrows();
        let lags: Vec<f64> = terms.iter().map(|(lag, _)| *lag).collect();
        let mut monomials = Vec::new();
        for (l, (_, b)) in terms.iter().enumerate() {
            if b.nrows() != n || b.ncols() != n {
                return Err(Error::Config(format!(
                    "linear functional matrices must all be {n}x{n}"
                )));
            }
            for col in 0..n {
                let coeff: Vec<f64> = (0..n).map(|row| b[(row, col)]).collect();
                if coeff.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let mut exponents = vec![0u32; n * lags.len()];
                exponents[l * n + col] = 1;
                monomials.push(PolyTerm { exponents, coeff });
            }
        }
        if monomials.is_empty() {
            return Err(Error::Config("linear functional is identically zero".into()));
        }
        PolyLagFunctional::new(n, lags, monomials)
    }

    /// Returns a copy with every coefficient multiplied by `a`.
    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        for term in &mut out.terms {
            for c in &mut term.coeff {
                *c *= a;
            }
        }
        out
    }

    /// Output (and state) dimension `n`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// The lag offsets read by this functional.
    pub fn lags(&self) -> &[f64] {
        &self.lags
    }

    /// The monomial terms.
    pub fn terms(&self) -> &[PolyTerm] {
        &self.terms
    }

    /// Number of stacked variables `n * lags.len()`.
    pub fn num_vars(&self) -> usize {
        self.n * self.lags.len()
    }

    /// Largest total degree over all monomials (0 for a constant).
    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|t| t.exponents.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    /// True when every monomial has total degree exactly one.
    pub fn is_linear(&self) -> bool {
        self.terms.iter().all(|t| t.exponents.iter().sum::<u32>() == 1)
    }

    /// Evaluates the polynomial on pre-gathered stacked values.
    pub fn eval_values(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.num_vars());
        debug_assert_eq!(out.len(), self.n);
        out.fill(0.0);
        for term in &self.terms {
            let mut p = 1.0;
            for (i, &e) in term.exponents.iter().enumerate() {
                if e > 0 {
                    p *= u[i].powi(e as i32);
                }
            }
            for (o, &c) in out.iter_mut().zip(term.coeff.iter()) {
                *o += c * p;
            }
        }
    }

    /// Directional derivative on pre-gathered stacked values:
    /// `out = sum_i (d poly / d u_i)(u) du_i`, computed analytically from the
    /// monomial exponents.
    pub fn frechet_values(&self, u: &[f64], du: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.num_vars());
        debug_assert_eq!(du.len(), self.num_vars());
        debug_assert_eq!(out.len(), self.n);
        out.fill(0.0);
        for term in &self.terms {
            let mut deriv = 0.0;
            for (i, &e) in term.exponents.iter().enumerate() {
                if e == 0 || du[i] == 0.0 {
                    continue;
                }
                // e * u_i^(e-1) * du_i * prod_{j != i} u_j^(e_j)
                let mut p = f64::from(e) * du[i];
                if e > 1 {
                    p *= u[i].powi(e as i32 - 1);
                }
                for (j, &ej) in term.exponents.iter().enumerate() {
                    if j != i && ej > 0 {
                        p *= u[j].powi(ej as i32);
                    }
                }
                deriv += p;
            }
            if deriv != 0.0 {
                for (o, &c) in out.iter_mut().zip(term.coeff.iter()) {
                    *o += c * deriv;
                }
            }
        }
    }

    /// Applies a *linear* functional to complex stacked values.
    ///
    /// Returns a domain error when the functional has terms of degree other
    /// than one (complex evaluation is only meaningful for linear maps, where
    /// it is the unique complex-linear extension).
    pub fn apply_linear_complex(&self, u: &[Complex64]) -> Result<Vec<Complex64>> {
        if !self.is_linear() {
            return Err(Error::Domain(
                "complex evaluation requires a linear functional".into(),
            ));
        }
        debug_assert_eq!(u.len(), self.num_vars());
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        for term in &self.terms {
            let i = term
                .exponents
                .iter()
                .position(|&e| e == 1)
                .expect("linear term has one unit exponent");
            for (o, &c) in out.iter_mut().zip(term.coeff.iter()) {
                *o += c * u[i];
            }
        }
        Ok(out)
    }

    /// Gathers the stacked value vector `u` from a segment.
    pub fn gather(&self, seg: &HistorySegment, u: &mut [f64]) -> Result<()> {
        if seg.n() != self.n {
            return Err(Error::Domain(format!(
                "segment dimension {} does not match functional dimension {}",
                seg.n(),
                self.n
            )));
        }
        debug_assert_eq!(u.len(), self.num_vars());
        for (l, &lag) in self.lags.iter().enumerate() {
            seg.eval_into(lag, &mut u[l * self.n..(l + 1) * self.n])?;
        }
        Ok(())
    }

    /// Evaluates the functional on a history segment.
    pub fn eval_functional(&self, seg: &HistorySegment) -> Result<DVector<f64>> {
        let mut u = vec![0.0; self.num_vars()];
        self.gather(seg, &mut u)?;
        let mut out = vec![0.0; self.n];
        self.eval_values(&u, &mut out);
        Ok(DVector::from_vec(out))
    }

    /// Directional (Fréchet) derivative at `seg` in direction `dir`.
    pub fn frechet_diff(&self, seg: &HistorySegment, dir: &HistorySegment) -> Result<DVector<f64>> {
        let mut u = vec![0.0; self.num_vars()];
        let mut du = vec![0.0; self.num_vars()];
        self.gather(seg, &mut u)?;
        self.gather(dir, &mut du)?;
        let mut out = vec![0.0; self.n];
        self.frechet_values(&u, &du, &mut out);
        Ok(DVector::from_vec(out))
    }

    /// Most negative lag read by the functional (0 when there are no lags).
    pub fn min_lag(&self) -> f64 {
        self.lags.iter().copied().fold(0.0, f64::min)
    }
}

/// Kind tag attached to trajectories so downstream consumers know which
/// driving process produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// No stochastic forcing (deterministic integration).
    Unforced,
    /// White noise (Brownian increments).
    Wiener,
    /// Two-state Markov chain.
    TwoStateMarkov,
}

/// Driving noise for non-white perturbations.
///
/// The general-noise averaging formulas only consume the autocorrelation
/// `R(s) = E[sigma(xi_s) sigma(xi_0)]`, so noise processes are described
/// either generatively (the two-state chain, which can also be simulated) or
/// purely through an exponential-sum correlation (which can only be averaged,
/// not path-simulated).
#[derive(Debug, Clone)]
pub enum NoiseModel {
    /// Brownian motion; used by the white-noise formulas and simulations.
    Wiener,
    /// Stationary two-state chain on `{-sigma0, +sigma0}` switching at rate
    /// `g/2` in each direction, so `R(s) = sigma0^2 exp(-g |s|)`.
    TwoStateMarkov { g: f64, sigma0: f64 },
    /// Direct exponential-sum correlation
    /// `R(s) = sum_j w_j exp(-g_j |s|)` with decay rates `g_j > 0`.
    ExpSumCorrelation { terms: Vec<(f64, f64)> },
}

impl NoiseModel {
    /// Validates the parameters.
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseModel::Wiener => Ok(()),
            NoiseModel::TwoStateMarkov { g, sigma0 } => {
                if !g.is_finite() || *g <= 0.0 {
                    return Err(Error::Config(format!("switching rate g = {g} must be > 0")));
                }
                if !sigma0.is_finite() {
                    return Err(Error::Config("sigma0 must be finite".into()));
                }
                Ok(())
            }
            NoiseModel::ExpSumCorrelation { terms } => {
                if terms.is_empty() {
                    return Err(Error::Config(
                        "exponential-sum correlation needs at least one term".into(),
                    ));
                }
                for (w, g) in terms {
                    if !w.is_finite() || !g.is_finite() || *g <= 0.0 {
                        return Err(Error::Config(format!(
                            "correlation term (weight {w}, rate {g}) must have finite weight and rate > 0"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Tag for trajectories produced under this noise.
    pub fn kind(&self) -> NoiseKind {
        match self {
            NoiseModel::Wiener => NoiseKind::Wiener,
            NoiseModel::TwoStateMarkov { .. } => NoiseKind::TwoStateMarkov,
            // Correlation-only descriptions cannot be path-simulated; the
            // kind is only meaningful for the other variants.
            NoiseModel::ExpSumCorrelation { .. } => NoiseKind::Unforced,
        }
    }

    /// Exponential-sum representation `R(s) = sum_j w_j exp(-g_j s)` of the
    /// autocorrelation, when one exists (`None` for white noise).
    pub fn correlation_terms(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            NoiseModel::Wiener => None,
            NoiseModel::TwoStateMarkov { g, sigma0 } => Some(vec![(sigma0 * sigma0, *g)]),
            NoiseModel::ExpSumCorrelation { terms } => Some(terms.clone()),
        }
    }

    /// Autocorrelation `R(s)` at lag `s >= 0` (`None` for white noise).
    pub fn autocorrelation(&self, s: f64) -> Option<f64> {
        self.correlation_terms().map(|terms| {
            terms.iter().map(|(w, g)| w * (-g * s.abs()).exp()).sum()
        })
    }

    /// Half-line Fourier transform of the autocorrelation,
    /// `integral_0^inf R(s) exp(i w s) ds = sum_j w_j / (g_j - i w)`,
    /// evaluated in closed form (`None` for white noise).
    pub fn correlation_fourier(&self, w: f64) -> Option<Complex64> {
        self.correlation_terms().map(|terms| {
            terms
                .iter()
                .map(|&(wt, g)| Complex64::new(wt, 0.0) / Complex64::new(g, -w))
                .sum()
        })
    }
}

/// The stochastic perturbation attached to the linear part.
#[derive(Debug, Clone)]
pub enum Perturbation {
    /// `dx = L0 x_t dt + eps G_q(x_t) dt + eps^2 G(x_t) dt + eps F(x_t) dW`.
    White {
        f: Option<PolyLagFunctional>,
        g: Option<PolyLagFunctional>,
        g_q: Option<PolyLagFunctional>,
    },
    /// `dx/dt = L0 x_t + eps sigma(xi_t) F(x_t) + eps G_q(x_t) + eps^2 G(x_t)`
    /// with a bounded stationary noise `xi`.
    GeneralNoise {
        f: PolyLagFunctional,
        g: Option<PolyLagFunctional>,
        g_q: Option<PolyLagFunctional>,
        noise: NoiseModel,
    },
}

impl Perturbation {
    /// The multiplicative/additive diffusion functional, when present.
    pub fn f(&self) -> Option<&PolyLagFunctional> {
        match self {
            Perturbation::White { f, .. } => f.as_ref(),
            Perturbation::GeneralNoise { f, .. } => Some(f),
        }
    }

    /// The order-`eps^2` deterministic forcing, when present.
    pub fn g(&self) -> Option<&PolyLagFunctional> {
        match self {
            Perturbation::White { g, .. } | Perturbation::GeneralNoise { g, .. } => g.as_ref(),
        }
    }

    /// The order-`eps` deterministic forcing, when present.
    pub fn g_q(&self) -> Option<&PolyLagFunctional> {
        match self {
            Perturbation::White { g_q, .. } | Perturbation::GeneralNoise { g_q, .. } => {
                g_q.as_ref()
            }
        }
    }

    /// Noise model driving the perturbation.
    pub fn noise(&self) -> NoiseModel {
        match self {
            Perturbation::White { .. } => NoiseModel::Wiener,
            Perturbation::GeneralNoise { noise, .. } => noise.clone(),
        }
    }
}

/// A weakly perturbed delay system near the verge of instability.
#[derive(Debug, Clone)]
pub struct PerturbedModel {
    pub n: usize,
    pub l0: MatrixLagMeasure,
    pub perturbation: Perturbation,
    pub epsilon: f64,
}

impl PerturbedModel {
    /// Builds and validates a model: dimensions must agree everywhere and
    /// every functional lag must lie within the history span of `l0`.
    pub fn new(l0: MatrixLagMeasure, perturbation: Perturbation, epsilon: f64) -> Result<Self> {
        let n = l0.n();
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::Config(format!("epsilon = {epsilon} must be finite and >= 0")));
        }
        let span = l0.span();
        let check = |f: Option<&PolyLagFunctional>, name: &str| -> Result<()> {
            if let Some(f) = f {
                if f.n() != n {
                    return Err(Error::Config(format!(
                        "functional {name} has dimension {}, expected {n}",
                        f.n()
                    )));
                }
                for &lag in f.lags() {
                    if lag < -span - LAG_DISTINCT_TOL * span.max(1.0) {
                        return Err(Error::LagOutsideSpan { lag, span_min: -span });
                    }
                }
            }
            Ok(())
        };
        check(perturbation.f(), "F")?;
        check(perturbation.g(), "G")?;
        check(perturbation.g_q(), "G_q")?;
        perturbation.noise().validate()?;
        if let Perturbation::GeneralNoise { noise: NoiseModel::Wiener, .. } = &perturbation {
            return Err(Error::Config(
                "general-noise perturbation cannot be driven by white noise; use the white variant"
                    .into(),
            ));
        }
        Ok(PerturbedModel { n, l0, perturbation, epsilon })
    }
}
