//! End-to-end acceptance gate for the reduction pipeline.
//!
//! Twelve criteria, each exercising one advertised capability at a pinned
//! protocol (model, seeds, step sizes, sample counts). Every criterion
//! prints one PASS/FAIL line with its wall-clock time and a short data
//! summary, and the process exits non-zero when any criterion fails.
//!
//! The gate runs without the default test harness (`harness = false`) so
//! the criteria execute sequentially in a fixed order: the per-criterion
//! wall-clock budgets stay meaningful, and nothing captures the report.
//! The Monte-Carlo criteria still parallelize internally over ensemble
//! members, so a multi-core machine is assumed by the larger budgets.
//!
//! Reference values, tolerances, budgets, and seeds are collected in the
//! [`anchor`], [`tol`], [`budget`], and [`seed`] modules rather than
//! scattered through the code, so the gate's strictness is auditable at a
//! glance. Relation-level invariants live in the `properties` suite and
//! value-level recomputations in the `oracles` suite; criterion 12 re-runs
//! a compact cross-section of them here so this binary alone certifies a
//! build.

use std::f64::consts::{FRAC_PI_2, PI};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use verge_core::averaging::{AveragingParams, AveragingWorkspace};
use verge_core::model::{
    MatrixLagMeasure, NoiseModel, Perturbation, PerturbedModel, PolyLagFunctional, PolyTerm,
};
use verge_core::reduced::{self, ReducedSDE};
use verge_core::simulator::{
    h_of_segment, integrate_sdde, integrate_unperturbed, lyapunov_estimator, mix_seed,
    sdde_ensemble,
};
use verge_core::spectrum::{critical_orbit, locate_and_build, pairing_exponential};
use verge_core::stats::{ks_distance, ks_distance_to_cdf, EmpiricalCdf};
use verge_core::{
    DriftComponent, DriftPart, HistorySegment, LevelPolynomial, ReducedCoefficients,
    Representation, SpectralData,
};

/// Four-digit reference anchors the pipeline must reproduce.
mod anchor {
    /// Additive-noise drift constant `2 |psi_hat_1|^2` of the scalar
    /// benchmark (gain -pi/2 at lag -1).
    pub const ADDITIVE_DRIFT: f64 = 0.5768;
    /// `i (psi_hat_1 - psi_hat_2) = -2 Im psi_hat_1` for the same model.
    pub const ROTATION_WEIGHT: f64 = 0.9060;
    /// Cubic-forcing drift magnitude `3 |Im psi_hat_1|`.
    pub const CUBIC_DRIFT: f64 = 1.3591;
    /// Decaying-mode part of the quadratic drift correction.
    pub const STABLE_CORRECTION: f64 = -0.7893;
    /// Total quadratic drift coefficient of the three-dimensional no-delay
    /// cross-check system.
    pub const NO_DELAY_TOTAL: f64 = 1.1;
    /// Two-state-chain drift/diffusion pairs `(g, C_b, C_sigma)`.
    pub const CHAIN_PAIRS: [(f64, f64, f64); 2] =
        [(2.0, 0.3734, 0.9873), (6.0, 0.1715, 0.4245)];
    /// Averaged Lyapunov constant for white noise multiplying `x(t-1)`.
    pub const LAMBDA_AVG: f64 = -0.122;
    /// Perturbation lag at which that constant changes sign.
    pub const SIGN_CHANGE_LAG: f64 = 0.8609;
    /// Critical damping of the delayed oscillator at `r = 2`, `omega0 = 1`,
    /// `eta = 0.3`, `kappa = 0`.
    pub const OSCILLATOR_BETA_C: f64 = -0.2987;
    /// The same threshold shifted by multiplicative noise of unit strength
    /// at `epsilon = 0.1`.
    pub const OSCILLATOR_BETA_NOISE: f64 = -0.3027;
    /// Predicted top exponent of the noisy scalar benchmark at
    /// `epsilon = 0.1`: `epsilon^2 lambda_avg / 2`.
    pub const TOP_EXPONENT: f64 = -0.0006;
}

/// Tolerances, one named constant per kind of comparison.
mod tol {
    /// Criticality and covector errors of the root finder (criterion 1).
    pub const SPECTRAL_ABS: f64 = 1e-10;
    /// Relative error against four-digit reference anchors.
    pub const ANCHOR_REL: f64 = 1e-3;
    /// Quadrature results against closed-form trigonometric averages.
    pub const QUADRATURE_REL: f64 = 1e-8;
    /// Rotation-mediated quadratic correction against its closed form.
    pub const CRITICAL_CORRECTION_ABS: f64 = 1e-4;
    /// Decaying-mode quadratic correction against its reference value
    /// (a truncated infinite-horizon integral; the quadrature's own tail
    /// bound is reported alongside).
    pub const STABLE_CORRECTION_REL: f64 = 2e-2;
    /// No-delay cross-check total against `+11/10`.
    pub const NO_DELAY_REL: f64 = 1e-3;
    /// Two-state-chain constants against their reference pairs.
    pub const CHAIN_REL: f64 = 1e-2;
    /// Averaged Lyapunov constant at lag 1.
    pub const LAMBDA_ABS: f64 = 1e-3;
    /// Location of the sign change in the perturbation lag.
    pub const SIGN_CHANGE_ABS: f64 = 1e-2;
    /// Oscillator damping thresholds (plain and noise-shifted).
    pub const THRESHOLD_ABS: f64 = 1e-3;
    /// Two-sample KS distance between the terminal-level laws of the full
    /// and the reduced equation, desk scale.
    pub const KS_LEVEL: f64 = 0.08;
    /// Two-sample KS distance between the passage-time laws, censored mass
    /// included, desk scale.
    pub const KS_PASSAGE: f64 = 0.10;
    /// One-sample KS distance of the reduced long run against its
    /// stationary Gamma law.
    pub const KS_REDUCED_GAMMA: f64 = 0.05;
    /// One-sample KS distance of the short full-equation run against the
    /// same Gamma law.
    pub const KS_FULL_GAMMA: f64 = 0.15;
}

/// Wall-clock budgets in seconds for the criteria that carry one.
mod budget {
    pub const SPECTRAL: f64 = 1.0;
    pub const CORRECTIONS: f64 = 60.0;
    pub const CHAIN_CONSTANTS: f64 = 60.0;
    pub const LEVEL_LAW: f64 = 900.0;
    pub const CHAIN_LAW: f64 = 600.0;
}

/// Fixed base seeds; ensemble members mix in their index, so every number
/// reported by this gate is bit-reproducible across runs and thread counts.
mod seed {
    pub const LEVEL_DDE: u64 = 0x5A11_0001;
    pub const LEVEL_RED: u64 = 0x5A11_0002;
    pub const LEVEL_TAU: u64 = 0x5A11_0003;
    pub const CHAIN_DDE: u64 = 0x5A22_0001;
    pub const CHAIN_RED: u64 = 0x5A22_0002;
    pub const CHAIN_TAU: u64 = 0x5A22_0003;
    pub const DENSITY_RED: u64 = 0x5A33_0001;
    pub const DENSITY_DDE: u64 = 0x5A33_0002;
    pub const EXPONENT: u64 = 0x5A44_0001;
    pub const DETERMINISM: u64 = 0x5A55_0001;
}

type CheckResult = Result<String, String>;

fn main() {
    println!("acceptance gate: 12 criteria, sequential, pinned seeds\n");
    let start = Instant::now();
    let mut failures = 0usize;

    let criteria: Vec<(&str, Option<f64>, Box<dyn FnOnce() -> CheckResult>)> = vec![
        ("spectral exactness, scalar benchmark", Some(budget::SPECTRAL), Box::new(spectral_exactness)),
        ("averaged white-noise constants", None, Box::new(averaged_white_constants)),
        ("quadratic drift corrections", Some(budget::CORRECTIONS), Box::new(quadratic_corrections)),
        ("no-delay cross-check system", None, Box::new(no_delay_cross_check)),
        ("two-state-chain constants", Some(budget::CHAIN_CONSTANTS), Box::new(chain_constants)),
        ("averaged Lyapunov constants and surface", None, Box::new(lyapunov_constants)),
        ("delayed-oscillator thresholds", None, Box::new(oscillator_thresholds)),
        ("level-law replication, desk scale", Some(budget::LEVEL_LAW), Box::new(level_law_replication)),
        ("chain-noise replication, desk scale", Some(budget::CHAIN_LAW), Box::new(chain_law_replication)),
        ("stationary-density cross-check", None, Box::new(stationary_density)),
        ("top-exponent estimate, desk scale", None, Box::new(top_exponent)),
        ("invariant spot-checks", None, Box::new(invariant_spot_checks)),
    ];

    for (index, (name, time_budget, body)) in criteria.into_iter().enumerate() {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| panic.downcast_ref::<&str>().copied())
                .unwrap_or("panicked");
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        let outcome = match (outcome, time_budget) {
            (Ok(detail), Some(b)) if secs > b => {
                Err(format!("over budget: {secs:.1} s > {b:.0} s ({detail})"))
            }
            (other, _) => other,
        };
        match outcome {
            Ok(detail) => {
                println!("criterion {:02}  {:<42} PASS {:>8.1}s  {}", index + 1, name, secs, detail);
            }
            Err(detail) => {
                failures += 1;
                println!("criterion {:02}  {:<42} FAIL {:>8.1}s  {}", index + 1, name, secs, detail);
            }
        }
    }

    println!(
        "\nacceptance: {}/12 criteria passed in {:.1} s",
        12 - failures,
        start.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures and small helpers
// ---------------------------------------------------------------------------

/// The scalar benchmark: `dx/dt = -(pi/2) x(t-1)`, critical at
/// `omega_c = pi/2` with covector weight `1 / (1 + i pi/2)`.
fn scalar_measure() -> MatrixLagMeasure {
    MatrixLagMeasure::new(vec![(-1.0, DMatrix::from_element(1, 1, -FRAC_PI_2))], None).unwrap()
}

fn scalar_psi() -> Complex64 {
    Complex64::new(1.0, 0.0) / Complex64::new(1.0, FRAC_PI_2)
}

/// `coeff * x(lag)^power` as a one-dimensional lag functional.
fn scalar_power(lag: f64, power: u32, coeff: f64) -> PolyLagFunctional {
    PolyLagFunctional::new(
        1,
        vec![lag],
        vec![PolyTerm { exponents: vec![power], coeff: vec![coeff] }],
    )
    .unwrap()
}

/// Delayed oscillator measure: position/velocity block at lag zero with
/// damping `beta`, feedback block `(-eta, kappa)` at lag `-r`.
fn oscillator_measure(omega0: f64, eta: f64, kappa: f64, r: f64, beta: f64) -> MatrixLagMeasure {
    let a0 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -omega0 * omega0, beta]);
    let a1 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, -eta, kappa]);
    MatrixLagMeasure::new(vec![(0.0, a0), (-r, a1)], None).unwrap()
}

/// A reduced level equation with drift `c_b h + c_b2 h^2` and squared
/// diffusion `c_sigma h^2`, bypassing the quadrature bookkeeping.
fn level_sde(c_b: f64, c_b2: f64, c_sigma: f64) -> ReducedSDE {
    let representation = Representation::Polynomial {
        drift: vec![DriftComponent {
            part: DriftPart::Base,
            poly: LevelPolynomial::new(vec![0.0, c_b, c_b2]),
        }],
        diffusion_sq: LevelPolynomial::new(vec![0.0, 0.0, c_sigma]),
    };
    ReducedSDE::new(ReducedCoefficients { representation, quadrature: Default::default() })
}

fn rel_err(actual: f64, expected: f64) -> f64 {
    (actual - expected).abs() / expected.abs()
}

/// Converts a library error into a criterion failure message.
fn lib<T>(r: verge_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Terminal levels of an ensemble, failing if any member aborted.
fn terminal_levels(outcomes: &[verge_core::simulator::EnsembleOutcome]) -> Result<Vec<f64>, String> {
    outcomes
        .iter()
        .map(|o| {
            o.h_final.ok_or_else(|| {
                format!("member {} aborted at t = {:?}", o.index, o.flagged_at)
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Criterion 1: spectral exactness on the scalar benchmark
// ---------------------------------------------------------------------------

fn spectral_exactness() -> CheckResult {
    let spec = lib(locate_and_build(&scalar_measure()))?;
    let wc_err = (spec.omega_c - FRAC_PI_2).abs();
    let psi_err = (spec.psi_hat[0][0] - scalar_psi()).norm();
    ensure(wc_err <= tol::SPECTRAL_ABS, || {
        format!("omega_c = {} (err {wc_err:.2e})", spec.omega_c)
    })?;
    ensure(psi_err <= tol::SPECTRAL_ABS, || {
        format!("psi_hat_1 = {} (err {psi_err:.2e})", spec.psi_hat[0][0])
    })?;
    Ok(format!("omega_c err {wc_err:.1e}, covector err {psi_err:.1e}"))
}

// ---------------------------------------------------------------------------
// Criterion 2: averaged white-noise constants of the scalar benchmark
// ---------------------------------------------------------------------------

fn averaged_white_constants() -> CheckResult {
    let measure = scalar_measure();
    let spec = lib(locate_and_build(&measure))?;
    let psi = spec.psi_hat[0][0];

    // The three four-digit anchors, straight from the computed covector.
    let additive = 2.0 * psi.norm_sqr();
    let rotation = -2.0 * psi.im;
    let cubic = 1.5 * rotation;
    for (value, reference, label) in [
        (additive, anchor::ADDITIVE_DRIFT, "2|psi|^2"),
        (rotation, anchor::ROTATION_WEIGHT, "-2 Im psi"),
        (cubic, anchor::CUBIC_DRIFT, "cubic drift"),
    ] {
        ensure(rel_err(value, reference) <= tol::ANCHOR_REL, || {
            format!("{label} = {value:.6} vs reference {reference}")
        })?;
    }

    // The same constants through the period-average quadrature: unit
    // additive noise plus unit cubic forcing at the feedback lag.
    let pert = Perturbation::White {
        f: Some(PolyLagFunctional::constant(vec![1.0]).unwrap()),
        g: Some(scalar_power(-1.0, 3, 1.0)),
        g_q: None,
    };
    let mut ws = lib(AveragingWorkspace::new(&measure, &spec, AveragingParams::default()))?;
    let coeffs = lib(ws.averaged(&pert))?;
    let b0 = coeffs.drift_coefficient(0).unwrap_or(0.0);
    let b2 = coeffs.drift_coefficient(2).unwrap_or(0.0);
    let s1 = coeffs.diffusion_sq_coefficient(1).unwrap_or(0.0);
    for (value, closed, label) in [
        (b0, additive, "drift constant"),
        (b2, 3.0 * psi.im, "cubic coefficient"),
        (s1, 4.0 * psi.norm_sqr(), "diffusion slope"),
    ] {
        ensure(rel_err(value, closed) <= tol::QUADRATURE_REL, || {
            format!("{label}: quadrature {value:.12} vs closed form {closed:.12}")
        })?;
    }
    Ok(format!(
        "anchors {additive:.4}/{rotation:.4}/{cubic:.4}, quadrature agrees to {:.1e}",
        [rel_err(b0, additive), rel_err(b2, 3.0 * psi.im), rel_err(s1, 4.0 * psi.norm_sqr())]
            .into_iter()
            .fold(0.0f64, f64::max)
    ))
}

// ---------------------------------------------------------------------------
// Criterion 3: quadratic drift corrections of the scalar benchmark
// ---------------------------------------------------------------------------

fn quadratic_corrections() -> CheckResult {
    let measure = scalar_measure();
    let mut ws = lib(AveragingWorkspace::from_measure(&measure, AveragingParams::default()))?;
    let corr = lib(ws.averaged_quadratic(&scalar_power(-1.0, 2, 1.0)))?;

    // The rotation-mediated part has the closed form -64 / (4 + pi^2)^2.
    let exact_critical = -64.0 / ((4.0 + PI * PI) * (4.0 + PI * PI));
    let critical = corr.critical.coefficient(2);
    ensure((critical - exact_critical).abs() <= tol::CRITICAL_CORRECTION_ABS, || {
        format!("rotation-mediated correction {critical:.8} vs closed form {exact_critical:.8}")
    })?;

    // The decaying-mode part is a truncated infinite-horizon integral; its
    // quadrature tail bound is reported with the result.
    let stable = corr.stable.coefficient(2);
    let tail = corr.decay.tail_bound;
    ensure(rel_err(stable, anchor::STABLE_CORRECTION) <= tol::STABLE_CORRECTION_REL, || {
        format!(
            "decaying-mode correction {stable:.6} vs reference {} (tail bound {tail:.1e})",
            anchor::STABLE_CORRECTION
        )
    })?;
    Ok(format!(
        "critical {critical:.6} (err {:.1e}), stable {stable:.5} (tail bound {tail:.1e})",
        (critical - exact_critical).abs()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 4: three-dimensional no-delay cross-check
// ---------------------------------------------------------------------------

fn no_delay_cross_check() -> CheckResult {
    // A pure rotation in the first two components and one decaying mode,
    // declared on a unit history span so the delay machinery runs unchanged.
    let a0 = DMatrix::from_row_slice(
        3,
        3,
        &[0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0],
    );
    let measure = lib(MatrixLagMeasure::new(vec![(0.0, a0)], Some(1.0)))?;
    let g_q = lib(PolyLagFunctional::new(
        3,
        vec![0.0],
        vec![
            PolyTerm { exponents: vec![0, 1, 1], coeff: vec![0.0, 1.0, 0.0] },
            PolyTerm { exponents: vec![0, 2, 0], coeff: vec![0.0, 0.0, 1.0] },
        ],
    ))?;
    let mut ws = lib(AveragingWorkspace::from_measure(&measure, AveragingParams::default()))?;
    let corr = lib(ws.averaged_quadratic(&g_q))?;
    let critical = corr.critical.coefficient(2);
    let total = critical + corr.stable.coefficient(2);
    ensure(critical.abs() <= 1e-9, || {
        format!("rotation-mediated part should vanish here, got {critical:.2e}")
    })?;
    ensure(rel_err(total, anchor::NO_DELAY_TOTAL) <= tol::NO_DELAY_REL, || {
        format!("total quadratic drift {total:.6} vs reference {}", anchor::NO_DELAY_TOTAL)
    })?;
    Ok(format!("total quadratic drift {total:.5} vs 11/10 (rel err {:.1e})", rel_err(total, 1.1)))
}

// ---------------------------------------------------------------------------
// Criterion 5: two-state-chain drift and diffusion constants
// ---------------------------------------------------------------------------

fn chain_constants() -> CheckResult {
    let measure = scalar_measure();
    let l1 = scalar_power(-1.0, 1, 1.0);
    let mut detail = String::new();
    for (g, cb_ref, cs_ref) in anchor::CHAIN_PAIRS {
        let mut ws = lib(AveragingWorkspace::from_measure(&measure, AveragingParams::default()))?;
        let consts =
            lib(ws.averaged_linear_gennoise(&l1, &NoiseModel::TwoStateMarkov { g, sigma0: 1.0 }))?;
        ensure(rel_err(consts.c_b, cb_ref) <= tol::CHAIN_REL, || {
            format!("g = {g}: C_b = {:.5} vs reference {cb_ref}", consts.c_b)
        })?;
        ensure(rel_err(consts.c_sigma, cs_ref) <= tol::CHAIN_REL, || {
            format!("g = {g}: C_sigma = {:.5} vs reference {cs_ref}", consts.c_sigma)
        })?;
        detail.push_str(&format!("g={g}: ({:.4}, {:.4})  ", consts.c_b, consts.c_sigma));
    }
    Ok(detail.trim_end().to_string())
}

// ---------------------------------------------------------------------------
// Criterion 6: averaged Lyapunov constants, sign change, and surface
// ---------------------------------------------------------------------------

fn lyapunov_constants() -> CheckResult {
    let measure = scalar_measure();
    let ws = lib(AveragingWorkspace::from_measure(&measure, AveragingParams::default()))?;

    // White noise multiplying x(t - r1): the constant at r1 = 1 ...
    let lambda_at = |ws: &AveragingWorkspace, r1: f64| -> Result<f64, String> {
        Ok(lib(ws.averaged_linear_white(&scalar_power(-r1, 1, 1.0)))?.lambda_avg)
    };
    let lambda_one = lambda_at(&ws, 1.0)?;
    ensure((lambda_one - anchor::LAMBDA_AVG).abs() <= tol::LAMBDA_ABS, || {
        format!("lambda_avg(1) = {lambda_one:.5} vs reference {}", anchor::LAMBDA_AVG)
    })?;

    // ... the sign change located by bisection on [0.5, 1] ...
    let (mut lo, mut hi) = (0.5, 1.0);
    let f_lo = lambda_at(&ws, lo)?;
    ensure(f_lo > 0.0 && lambda_one < 0.0, || {
        format!("bisection bracket lost: lambda({lo}) = {f_lo:.4}, lambda(1) = {lambda_one:.4}")
    })?;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if lambda_at(&ws, mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    ensure((root - anchor::SIGN_CHANGE_LAG).abs() <= tol::SIGN_CHANGE_ABS, || {
        format!("sign change at r1 = {root:.5} vs reference {}", anchor::SIGN_CHANGE_LAG)
    })?;

    // ... and the chain-noise constant on a 10 x 10 (r1, g) grid, which
    // must show stabilization and destabilization both.
    let mut ws = ws;
    let (mut positive, mut negative) = (0usize, 0usize);
    for i in 1..=10 {
        let r1 = 0.1 * i as f64;
        let l1 = scalar_power(-r1, 1, 1.0);
        for j in 1..=10 {
            let g = j as f64;
            let consts =
                lib(ws.averaged_linear_gennoise(&l1, &NoiseModel::TwoStateMarkov { g, sigma0: 1.0 }))?;
            if consts.lambda_avg > 0.0 {
                positive += 1;
            } else {
                negative += 1;
            }
        }
    }
    ensure(positive > 0 && negative > 0, || {
        format!("surface is one-signed: {positive} positive, {negative} negative")
    })?;
    Ok(format!(
        "lambda(1) = {lambda_one:.4}, sign change at {root:.4}, surface {positive}+/{negative}-"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 7: delayed-oscillator damping thresholds
// ---------------------------------------------------------------------------

fn oscillator_thresholds() -> CheckResult {
    let (omega0, eta, kappa, r) = (1.0, 0.3, 0.0, 2.0);
    let (beta_c, _wc) = lib(reduced::delayed_feedback_critical_damping(omega0, eta, kappa, r))?;
    ensure((beta_c - anchor::OSCILLATOR_BETA_C).abs() <= tol::THRESHOLD_ABS, || {
        format!("beta_c = {beta_c:.5} vs reference {}", anchor::OSCILLATOR_BETA_C)
    })?;

    let spec = lib(locate_and_build(&oscillator_measure(omega0, eta, kappa, r, beta_c)))?;
    let shift = lib(reduced::noise_shifted_threshold(beta_c, spec.c, 0.1, 1.0))?;
    ensure((shift.beta_c_noise - anchor::OSCILLATOR_BETA_NOISE).abs() <= tol::THRESHOLD_ABS, || {
        format!(
            "shifted threshold {:.5} vs reference {}",
            shift.beta_c_noise,
            anchor::OSCILLATOR_BETA_NOISE
        )
    })?;
    Ok(format!(
        "beta_c = {beta_c:.5}, noise-shifted {:.5} ({})",
        shift.beta_c_noise,
        shift.effect()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 8: terminal-level and passage-time laws, white noise, desk scale
// ---------------------------------------------------------------------------
//
// Desk-scale substitute for the full-size study (which used epsilon = 0.025
// and 4000 samples per case): epsilon = 0.05 and 500 full-equation members
// against 4000 reduced members, three forcing cases. Both KS bounds carry
// the finite-epsilon bias of the larger epsilon, which is why they sit well
// above the pure sampling floor (~0.065 at these sizes).

fn level_law_replication() -> CheckResult {
    let epsilon = 0.05;
    let (h0, h_star, t_macro): (f64, f64, f64) = (0.72, 1.5, 2.0);
    let (n_full, n_reduced) = (500usize, 4000usize);
    let (dt_full, dt_reduced) = (5e-5, 1e-4);
    let sigma = 1.0;

    let measure = scalar_measure();
    let spec = lib(locate_and_build(&measure))?;
    let mut ws = lib(AveragingWorkspace::new(&measure, &spec, AveragingParams::default()))?;
    let init = lib(critical_orbit(&spec, 1.0, h0, 0.0, 20_001))?;
    let t_end = t_macro / (epsilon * epsilon);
    let modulus_threshold = (2.0 * h_star).sqrt();

    let cases: [(f64, f64); 3] = [(0.0, 0.0), (0.0, 1.0), (1.0 / 3.0f64.sqrt(), 0.0)];
    let mut detail = String::new();
    for (k, (gamma_q, gamma_c)) in cases.into_iter().enumerate() {
        let pert = Perturbation::White {
            f: Some(PolyLagFunctional::constant(vec![sigma]).unwrap()),
            g: (gamma_c != 0.0).then(|| scalar_power(-1.0, 3, gamma_c)),
            g_q: (gamma_q != 0.0).then(|| scalar_power(-1.0, 2, gamma_q)),
        };
        let coeffs = lib(ws.averaged(&pert))?;
        let sde = ReducedSDE::new(coeffs);
        let model = lib(PerturbedModel::new(measure.clone(), pert, epsilon))?;

        let outcomes = lib(sdde_ensemble(
            &model,
            &spec,
            &init,
            dt_full,
            t_end,
            Some(modulus_threshold),
            n_full,
            seed::LEVEL_DDE + 16 * k as u64,
        ))?;
        let full_levels = terminal_levels(&outcomes)?;
        let full_tau = outcomes.iter().map(|o| o.first_passage.map(|t| t * epsilon * epsilon));

        let red = lib(reduced::reduced_ensemble(
            &sde,
            h0,
            dt_reduced,
            t_macro,
            n_reduced,
            seed::LEVEL_RED + 16 * k as u64,
        ))?;
        let red_levels: Vec<f64> = red.iter().map(|o| o.h_final).collect();
        let red_tau = lib(reduced::first_passage(
            &sde,
            h0,
            h_star,
            dt_reduced,
            t_macro,
            n_reduced,
            seed::LEVEL_TAU + 16 * k as u64,
        ))?;

        let ks_level = ks_distance(
            &lib(EmpiricalCdf::from_samples(&full_levels))?,
            &lib(EmpiricalCdf::from_samples(&red_levels))?,
        );
        let ks_tau = ks_distance(
            &lib(EmpiricalCdf::from_censored(full_tau))?,
            &lib(EmpiricalCdf::from_censored(red_tau))?,
        );
        ensure(ks_level <= tol::KS_LEVEL, || {
            format!("case (gq, gc) = ({gamma_q:.3}, {gamma_c}): terminal-level KS {ks_level:.4} > {}", tol::KS_LEVEL)
        })?;
        ensure(ks_tau <= tol::KS_PASSAGE, || {
            format!("case (gq, gc) = ({gamma_q:.3}, {gamma_c}): passage-time KS {ks_tau:.4} > {}", tol::KS_PASSAGE)
        })?;
        detail.push_str(&format!("({gamma_q:.2},{gamma_c}): KS {ks_level:.3}/{ks_tau:.3}  "));
    }
    Ok(detail.trim_end().to_string())
}

// ---------------------------------------------------------------------------
// Criterion 9: the same comparison driven by a two-state chain, desk scale
// ---------------------------------------------------------------------------

fn chain_law_replication() -> CheckResult {
    let epsilon = 0.05;
    let (h0, h_star, t_macro): (f64, f64, f64) = (0.5, 1.0, 1.0);
    let (n_full, n_reduced) = (500usize, 4000usize);
    let (dt_full, dt_reduced) = (5e-5, 1e-4);

    let measure = scalar_measure();
    let spec = lib(locate_and_build(&measure))?;
    let l1 = scalar_power(-1.0, 1, 1.0);
    let init = lib(critical_orbit(&spec, 1.0, h0, 0.0, 20_001))?;
    let t_end = t_macro / (epsilon * epsilon);
    let modulus_threshold = (2.0 * h_star).sqrt();

    let mut detail = String::new();
    for (k, g) in [2.0, 6.0].into_iter().enumerate() {
        let noise = NoiseModel::TwoStateMarkov { g, sigma0: 1.0 };
        let mut ws = lib(AveragingWorkspace::new(&measure, &spec, AveragingParams::default()))?;
        let consts = lib(ws.averaged_linear_gennoise(&l1, &noise))?;
        let sde = level_sde(consts.c_b, 0.0, consts.c_sigma);

        let model = lib(PerturbedModel::new(
            measure.clone(),
            Perturbation::GeneralNoise { f: l1.clone(), g: None, g_q: None, noise },
            epsilon,
        ))?;
        let outcomes = lib(sdde_ensemble(
            &model,
            &spec,
            &init,
            dt_full,
            t_end,
            Some(modulus_threshold),
            n_full,
            seed::CHAIN_DDE + 16 * k as u64,
        ))?;
        let full_levels = terminal_levels(&outcomes)?;
        let full_tau = outcomes.iter().map(|o| o.first_passage.map(|t| t * epsilon * epsilon));

        let red = lib(reduced::reduced_ensemble(
            &sde,
            h0,
            dt_reduced,
            t_macro,
            n_reduced,
            seed::CHAIN_RED + 16 * k as u64,
        ))?;
        let red_levels: Vec<f64> = red.iter().map(|o| o.h_final).collect();
        let red_tau = lib(reduced::first_passage(
            &sde,
            h0,
            h_star,
            dt_reduced,
            t_macro,
            n_reduced,
            seed::CHAIN_TAU + 16 * k as u64,
        ))?;

        let ks_level = ks_distance(
            &lib(EmpiricalCdf::from_samples(&full_levels))?,
            &lib(EmpiricalCdf::from_samples(&red_levels))?,
        );
        let ks_tau = ks_distance(
            &lib(EmpiricalCdf::from_censored(full_tau))?,
            &lib(EmpiricalCdf::from_censored(red_tau))?,
        );
        ensure(ks_level <= tol::KS_LEVEL, || {
            format!("g = {g}: terminal-level KS {ks_level:.4} > {}", tol::KS_LEVEL)
        })?;
        ensure(ks_tau <= tol::KS_PASSAGE, || {
            format!("g = {g}: passage-time KS {ks_tau:.4} > {}", tol::KS_PASSAGE)
        })?;
        detail.push_str(&format!("g={g}: KS {ks_level:.3}/{ks_tau:.3}  "));
    }
    Ok(detail.trim_end().to_string())
}

// ---------------------------------------------------------------------------
// Criterion 10: stationary density of the noisy delayed oscillator
// ---------------------------------------------------------------------------
//
// Desk-scale substitute for the full-size density study (3200 samples over
// 4500 delay periods, a day of CPU): the reduced equation is run to its
// stationary law and checked against the analytic Gamma density, and a
// short full-equation run (200 members, 500 rotation periods) is checked
// against the same density at a loose bound. The full-equation histogram
// carries a finite-noise bias at epsilon = 0.1 on top of its sampling
// noise, which is the stated limitation of this criterion.

fn stationary_density() -> CheckResult {
    let (omega0, eta, kappa, r) = (1.0, 0.3, 0.0, 2.0);
    let (d_tilde, b, epsilon, beta_run): (f64, f64, f64, f64) = (1.0, 1.0, 0.1, -0.301);
    let (beta_c, _wc) = lib(reduced::delayed_feedback_critical_damping(omega0, eta, kappa, r))?;
    let measure = oscillator_measure(omega0, eta, kappa, r, beta_c);
    let spec = lib(locate_and_build(&measure))?;

    // Noise forces the velocity in proportion to the position; the running
    // damping is split as beta_c plus an order-epsilon^2 detuning so the
    // critical pairing stays exact.
    let beta_det = (beta_run - beta_c) / (epsilon * epsilon);
    let f = lib(PolyLagFunctional::new(
        2,
        vec![0.0],
        vec![PolyTerm { exponents: vec![1, 0], coeff: vec![0.0, (2.0 * d_tilde).sqrt()] }],
    ))?;
    let g = lib(PolyLagFunctional::new(
        2,
        vec![0.0],
        vec![
            PolyTerm { exponents: vec![0, 1], coeff: vec![0.0, beta_det] },
            PolyTerm { exponents: vec![2, 1], coeff: vec![0.0, -b] },
        ],
    ))?;
    let pert = Perturbation::White { f: Some(f), g: Some(g), g_q: None };

    let mut ws = lib(AveragingWorkspace::new(&measure, &spec, AveragingParams::default()))?;
    let coeffs = lib(ws.averaged(&pert))?;
    let c_b = coeffs.drift_coefficient(1).unwrap_or(0.0);
    let c_b2 = coeffs.drift_coefficient(2).unwrap_or(0.0);
    let c_sigma = coeffs.diffusion_sq_coefficient(2).unwrap_or(0.0);
    let density = lib(reduced::invariant_density(c_b, c_b2, c_sigma))?;

    // Reduced long run against the analytic Gamma law.
    let sde = ReducedSDE::new(coeffs);
    let t_long = 30.0 / c_b2.abs();
    let red = lib(reduced::reduced_ensemble(
        &sde,
        density.mean(),
        5e-4,
        t_long,
        2000,
        seed::DENSITY_RED,
    ))?;
    let red_levels: Vec<f64> = red.iter().map(|o| o.h_final).collect();
    let ks_red =
        ks_distance_to_cdf(&lib(EmpiricalCdf::from_samples(&red_levels))?, |h| density.cdf(h));
    ensure(ks_red <= tol::KS_REDUCED_GAMMA, || {
        format!("reduced long run vs Gamma law: KS {ks_red:.4} > {}", tol::KS_REDUCED_GAMMA)
    })?;

    // Short full-equation run against the same law.
    let model = lib(PerturbedModel::new(measure.clone(), pert, epsilon))?;
    let init = lib(critical_orbit(&spec, r, density.mean(), 0.0, 20_001))?;
    let outcomes = lib(sdde_ensemble(
        &model,
        &spec,
        &init,
        1e-4,
        500.0 * spec.period,
        None,
        200,
        seed::DENSITY_DDE,
    ))?;
    let full_levels = terminal_levels(&outcomes)?;
    let ks_full =
        ks_distance_to_cdf(&lib(EmpiricalCdf::from_samples(&full_levels))?, |h| density.cdf(h));
    ensure(ks_full <= tol::KS_FULL_GAMMA, || {
        format!("full-equation run vs Gamma law: KS {ks_full:.4} > {}", tol::KS_FULL_GAMMA)
    })?;
    Ok(format!(
        "Gamma({:.4}, {:.4}); reduced KS {ks_red:.3} (2000 members), full KS {ks_full:.3} \
         (200 members, 500 periods; desk-scale stand-in for the full density study, \
         finite-noise bias included)",
        density.shape(),
        density.rate()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 11: finite-time top-exponent estimate, desk scale
// ---------------------------------------------------------------------------
//
// Desk-scale substitute for the full-size estimate (80 realizations to
// t = 120000): 20 realizations to t = 20000. The ensemble mean of
// log sup |x| / t over the trailing five time units must be negative and
// within a factor of three of the predicted exponent either way.

fn top_exponent() -> CheckResult {
    let epsilon = 0.1;
    let (t_end, dt, window) = (20_000.0, 5e-5, 5.0);
    let measure = scalar_measure();
    let model = lib(PerturbedModel::new(
        measure,
        Perturbation::White { f: Some(scalar_power(-1.0, 1, 1.0)), g: None, g_q: None },
        epsilon,
    ))?;
    let init = lib(HistorySegment::sample(1, 1.0, 20_001, |theta, out| {
        out[0] = (FRAC_PI_2 * theta).cos();
    }))?;

    let estimates: Vec<f64> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let traj =
                lib(integrate_sdde(&model, &init, dt, t_end, mix_seed(seed::EXPONENT, i), 2000))?;
            if let Some(t) = traj.flagged_at {
                return Err(format!("realization {i} aborted at t = {t}"));
            }
            Ok(lib(lyapunov_estimator(&traj, window, 0, &[t_end]))?[0].1)
        })
        .collect::<Result<_, String>>()?;
    let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;

    let predicted = anchor::TOP_EXPONENT;
    ensure(mean < 0.0, || format!("mean exponent {mean:.2e} is not negative"))?;
    ensure(mean >= 3.0 * predicted && mean <= predicted / 3.0, || {
        format!(
            "mean exponent {mean:.2e} outside [{:.1e}, {:.1e}] around prediction {predicted:.1e}",
            3.0 * predicted,
            predicted / 3.0
        )
    })?;
    Ok(format!("mean exponent {mean:.2e} vs predicted {predicted:.1e} (20 realizations)"))
}

// ---------------------------------------------------------------------------
// Criterion 12: compact cross-section of the invariant suites
// ---------------------------------------------------------------------------
//
// The full relation-level checks run in the `properties` suite and the
// value-level recomputations in `oracles`; this criterion re-runs one
// compact instance of each headline invariant so the gate binary alone
// certifies a build: biorthogonality, level conservation, homogeneity,
// phase invariance, directional derivatives, and bit determinism.

fn invariant_spot_checks() -> CheckResult {
    let measure = scalar_measure();
    let spec = lib(locate_and_build(&measure))?;

    // Biorthogonality through the closed-form pairing, both rows.
    let i_omega = Complex64::new(0.0, spec.omega_c);
    let d_conj = spec.d.map(|z| z.conj());
    let p11 = pairing_exponential(&spec, &measure, 1, &spec.d, i_omega);
    let p12 = pairing_exponential(&spec, &measure, 1, &d_conj, -i_omega);
    ensure((p11 - Complex64::new(1.0, 0.0)).norm() <= 1e-8 && p12.norm() <= 1e-8, || {
        format!("pairing rows ({p11}, {p12}) are not biorthogonal")
    })?;

    // Level conservation along the unperturbed flow over one period.
    let h0 = 0.8;
    let init = lib(critical_orbit(&spec, 1.0, h0, 0.0, 4097))?;
    let traj = lib(integrate_unperturbed(&measure, &init, spec.period, 1e-4))?;
    let h_end = lib(h_of_segment(&spec, &measure, &lib(traj.final_segment(1.0))?))?;
    ensure((h_end - h0).abs() / h0 <= 1e-3, || {
        format!("level drifted from {h0} to {h_end:.6} over one period")
    })?;

    // Homogeneity of the averaged coefficients for a linear functional.
    let mut ws = lib(AveragingWorkspace::new(&measure, &spec, AveragingParams::default()))?;
    let linear_pert = Perturbation::White {
        f: Some(scalar_power(-1.0, 1, 1.0)),
        g: None,
        g_q: None,
    };
    let coeffs = lib(ws.averaged(&linear_pert))?;
    let (h, a) = (0.6, 2.0);
    let drift_hom = (coeffs.drift(a * h) - a * coeffs.drift(h)).abs();
    let diff_hom = (coeffs.diffusion_sq(a * h) - a * a * coeffs.diffusion_sq(h)).abs();
    ensure(drift_hom <= 1e-10 && diff_hom <= 1e-10, || {
        format!("homogeneity residuals {drift_hom:.1e}, {diff_hom:.1e}")
    })?;

    // Phase invariance: rotating the eigenvector phase must not move any
    // averaged coefficient, quadratic corrections included.
    let rot = Complex64::from_polar(1.0, 1.1);
    let rotated = SpectralData {
        omega_c: spec.omega_c,
        d: spec.d.map(|z| z * rot),
        d2: spec.d2.clone(),
        c: spec.c * rot.conj(),
        psi_hat: [
            spec.psi_hat[0].map(|z| z * rot.conj()),
            spec.psi_hat[0].map(|z| (z * rot.conj()).conj()),
        ],
        period: spec.period,
    };
    let quad_pert = Perturbation::White {
        f: Some(PolyLagFunctional::constant(vec![1.0]).unwrap()),
        g: None,
        g_q: Some(scalar_power(-1.0, 2, 1.0)),
    };
    let base = lib(ws.averaged(&quad_pert))?;
    let mut ws_rot = lib(AveragingWorkspace::new(&measure, &rotated, AveragingParams::default()))?;
    let turned = lib(ws_rot.averaged(&quad_pert))?;
    let phase_res = [0.25, 1.0, 2.0]
        .into_iter()
        .map(|h| {
            (base.drift(h) - turned.drift(h))
                .abs()
                .max((base.diffusion_sq(h) - turned.diffusion_sq(h)).abs())
        })
        .fold(0.0f64, f64::max);
    ensure(phase_res <= 1e-10, || format!("phase-rotation residual {phase_res:.1e}"))?;

    // Directional derivative against a central finite difference.
    let func = lib(PolyLagFunctional::new(
        1,
        vec![0.0, -0.5],
        vec![
            PolyTerm { exponents: vec![2, 1], coeff: vec![0.7] },
            PolyTerm { exponents: vec![0, 3], coeff: vec![-0.4] },
        ],
    ))?;
    let seg = lib(HistorySegment::sample(1, 1.0, 257, |theta, out| {
        out[0] = (1.3 * theta).sin() + 0.4;
    }))?;
    let dir = lib(HistorySegment::sample(1, 1.0, 257, |theta, out| {
        out[0] = 0.3 - theta * theta;
    }))?;
    let analytic = lib(func.frechet_diff(&seg, &dir))?[0];
    let fd = 1e-6;
    let mut plus = seg.clone();
    lib(plus.axpy(fd, &dir))?;
    let mut minus = seg.clone();
    lib(minus.axpy(-fd, &dir))?;
    let numeric = (lib(func.eval_functional(&plus))?[0] - lib(func.eval_functional(&minus))?[0])
        / (2.0 * fd);
    ensure(rel_err(analytic, numeric) <= 1e-6, || {
        format!("directional derivative {analytic:.10} vs difference {numeric:.10}")
    })?;

    // Bit determinism of the stochastic integrator.
    let model = lib(PerturbedModel::new(
        scalar_measure(),
        Perturbation::White { f: Some(PolyLagFunctional::constant(vec![1.0]).unwrap()), g: None, g_q: None },
        0.3,
    ))?;
    let short_init = lib(HistorySegment::sample(1, 1.0, 1001, |theta, out| {
        out[0] = theta.cos();
    }))?;
    let a = lib(integrate_sdde(&model, &short_init, 1e-3, 5.0, seed::DETERMINISM, 1))?;
    let b = lib(integrate_sdde(&model, &short_init, 1e-3, 5.0, seed::DETERMINISM, 1))?;
    ensure(a.num_frames() == b.num_frames(), || "replay length mismatch".into())?;
    for j in 0..a.num_frames() {
        if a.component(j, 0).to_bits() != b.component(j, 0).to_bits() {
            return Err(format!("replay diverged at frame {j}"));
        }
    }

    Ok("biorthogonality, conservation, homogeneity, phase freedom, derivatives, determinism \
        re-checked; full suites run with the workspace tests"
        .to_string())
}
