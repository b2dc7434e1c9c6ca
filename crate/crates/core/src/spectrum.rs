//! Characteristic roots, critical eigendata and spectral projections for
//! linear autonomous delay systems.
//!
//! For a lag measure `L0(seg) = sum_k A_k seg(theta_k)` the characteristic
//! matrix is
//!
//! ```text
//! Delta(lambda)  = lambda I - sum_k A_k exp(lambda theta_k)
//! Delta'(lambda) =        I - sum_k theta_k A_k exp(lambda theta_k)
//! ```
//!
//! The toolkit targets systems at the *verge of oscillatory instability*: a
//! single simple root pair `+/- i omega_c` on the imaginary axis with every
//! other root strictly stable. [`locate_critical_pair`] verifies this shape
//! with an argument-principle root census on a finite window and polishes the
//! critical root by Newton iteration; [`eigendata`] then builds the
//! eigenvectors, the adjoint covectors and the normalization constant that
//! the averaging formulas consume.
//!
//! The census is necessarily a *finite-window* statement: roots outside the
//! scanned rectangle are invisible. The default window is sized so that no
//! *unstable* root can escape it — any root with non-negative real part has
//! modulus at most the sum of the coefficient norms — so the verge verdict
//! is rigorous; only stable roots deep in the left half-plane fall outside,
//! and the report records the window so a caller can widen it.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::MatrixLagMeasure;
use crate::simulator::HistorySegment;

/// Absolute bound on `|Re lambda|` for the critical root (distance from the
/// imaginary axis).
pub const TOL_IMAG_AXIS: f64 = 1e-8;

/// Real parts above this count as "unstable" for non-critical roots.
pub const TOL_REAL_STABLE: f64 = 1e-9;

/// Margin by which the census window extends past the imaginary axis (and
/// below the real axis, so real roots sit inside the window rather than on
/// its boundary).
pub const WINDOW_MARGIN: f64 = 1e-6;

/// Scaled-determinant bound for a polished root.
const POLISH_DET_BOUND: f64 = 1e-12;

/// Separation required between the two smallest singular values of the
/// characteristic matrix at the critical root.
const DEGENERACY_RATIO: f64 = 1e-6;

/// Assembles the characteristic matrix and its derivative in `lambda`.
pub fn characteristic_matrix(
    measure: &MatrixLagMeasure,
    lambda: Complex64,
) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
    let n = measure.n();
    let mut delta = DMatrix::<Complex64>::zeros(n, n);
    let mut dprime = DMatrix::<Complex64>::zeros(n, n);
    for i in 0..n {
        delta[(i, i)] = lambda;
        dprime[(i, i)] = Complex64::new(1.0, 0.0);
    }
    for (theta, a) in measure.terms() {
        let w = (lambda * *theta).exp();
        for i in 0..n {
            for j in 0..n {
                let aij = Complex64::new(a[(i, j)], 0.0);
                delta[(i, j)] -= aij * w;
                dprime[(i, j)] -= aij * w * *theta;
            }
        }
    }
    (delta, dprime)
}

fn det_characteristic(measure: &MatrixLagMeasure, lambda: Complex64) -> Complex64 {
    let (delta, _) = characteristic_matrix(measure, lambda);
    delta.determinant()
}

/// `|det Delta(lambda)|` divided by the n-th power of a row-magnitude bound
/// (`1 + |lambda| + sum_k ||A_k||_F` dominates every row for `Re lambda <=
/// 0`), giving a scale-free residual that vanishes exactly at roots. A
/// per-row Hadamard scale would degenerate for one-dimensional systems,
/// where the determinant *is* the single row.
fn scaled_det(measure: &MatrixLagMeasure, lambda: Complex64) -> f64 {
    let (delta, _) = characteristic_matrix(measure, lambda);
    let det = delta.determinant().norm();
    let coeff_scale: f64 = measure
        .terms()
        .iter()
        .map(|(theta, a)| {
            let growth = (lambda.re * theta).exp().max(1.0);
            a.iter().map(|x| x * x).sum::<f64>().sqrt() * growth
        })
        .sum();
    let scale = 1.0 + lambda.norm() + coeff_scale;
    det / scale.powi(delta.nrows() as i32)
}

/// Rectangle in the complex plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
}

impl Rect {
    fn center(&self) -> Complex64 {
        Complex64::new(
            0.5 * (self.re_min + self.re_max),
            0.5 * (self.im_min + self.im_max),
        )
    }

    fn diameter(&self) -> f64 {
        (self.re_max - self.re_min).hypot(self.im_max - self.im_min)
    }

    fn contains(&self, z: Complex64, slack: f64) -> bool {
        z.re >= self.re_min - slack
            && z.re <= self.re_max + slack
            && z.im >= self.im_min - slack
            && z.im <= self.im_max + slack
    }
}

/// Search window and tolerances for the root census.
#[derive(Debug, Clone)]
pub struct ScanConfig {
    /// Left edge of the window; default `-10 / span`.
    pub re_min: Option<f64>,
    /// Right edge; default [`WINDOW_MARGIN`] past the imaginary axis.
    pub re_max: Option<f64>,
    /// Top edge; default `max(8 * omega_guess, 20 / span)`.
    pub im_max: Option<f64>,
    /// Rough idea of the critical frequency, used to size the window.
    pub omega_guess: Option<f64>,
    /// Bound on `|Re lambda|` for the critical root.
    pub tol_imag: f64,
    /// Real parts above this flag a non-critical root as unstable.
    pub tol_real: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            re_min: None,
            re_max: None,
            im_max: None,
            omega_guess: None,
            tol_imag: TOL_IMAG_AXIS,
            tol_real: TOL_REAL_STABLE,
        }
    }
}

impl ScanConfig {
    fn window(&self, measure: &MatrixLagMeasure) -> Rect {
        let span = measure.span();
        // Any root with Re lambda >= 0 satisfies |lambda| <= sum_k ||A_k||
        // (the exponentials have modulus <= 1 there), so extending the window
        // past that sum makes the census complete for the stability verdict:
        // only stable roots deep in the left half-plane can escape it.
        let unstable_bound: f64 = 1.0
            + measure
                .terms()
                .iter()
                .map(|(_, a)| a.iter().map(|x| x * x).sum::<f64>().sqrt())
                .sum::<f64>();
        let re_min = self.re_min.unwrap_or(-10.0 / span);
        let re_max = self.re_max.unwrap_or(unstable_bound);
        let im_max = self.im_max.unwrap_or_else(|| {
            (20.0 / span)
                .max(8.0 * self.omega_guess.unwrap_or(0.0))
                .max(unstable_bound)
        });
        // The bottom edge dips slightly below the real axis so real roots lie
        // strictly inside; complex roots are counted once via the upper half.
        Rect { re_min, re_max, im_min: -WINDOW_MARGIN, im_max }
    }
}

/// Outcome of the argument-principle root census on a window.
#[derive(Debug, Clone)]
pub struct CensusReport {
    /// The scanned window.
    pub window: Rect,
    /// Final isolating cells and their winding counts (cells with count 0
    /// are dropped).
    pub subrectangles: Vec<(Rect, usize)>,
    /// Polished roots, `(re, im)`.
    pub roots: Vec<(f64, f64)>,
}

impl CensusReport {
    /// JSON rendering of the census, including the finite-window caveat.
    pub fn to_json(&self) -> serde_json::Value {
        let rect_json = |r: &Rect| {
            serde_json::json!({
                "re_min": r.re_min, "re_max": r.re_max,
                "im_min": r.im_min, "im_max": r.im_max,
            })
        };
        serde_json::json!({
            "window": rect_json(&self.window),
            "subrectangles": self
                .subrectangles
                .iter()
                .map(|(r, c)| serde_json::json!({"rect": rect_json(r), "count": c}))
                .collect::<Vec<_>>(),
            "roots": self
                .roots
                .iter()
                .map(|(re, im)| serde_json::json!({"re": re, "im": im}))
                .collect::<Vec<_>>(),
            "note": "counts are exact inside the window only; roots outside the \
                     scanned rectangle are not visible to the census",
        })
    }
}

/// Accumulated phase change of `det Delta` along the segment `[z0, z1]`,
/// refined adaptively until each sub-step turns by at most pi/2.
fn edge_phase_change(
    measure: &MatrixLagMeasure,
    z0: Complex64,
    v0: Complex64,
    z1: Complex64,
    v1: Complex64,
    depth: u32,
) -> Result<f64> {
    if v0.norm() == 0.0 || v1.norm() == 0.0 {
        return Err(Error::WindowTooSmall(format!(
            "characteristic determinant vanishes on the census boundary near \
             {} + {}i; shift the window",
            z0.re, z0.im
        )));
    }
    let dphi = (v1 / v0).arg();
    if dphi.abs() <= std::f64::consts::FRAC_PI_2 && depth > 0 {
        // One refinement guards against an even number of half-turns hiding
        // inside a seemingly small phase step.
        let zm = 0.5 * (z0 + z1);
        let vm = det_characteristic(measure, zm);
        if vm.norm() == 0.0 {
            return Err(Error::WindowTooSmall(format!(
                "characteristic determinant vanishes on the census boundary near \
                 {} + {}i; shift the window",
                zm.re, zm.im
            )));
        }
        let a = (vm / v0).arg();
        let b = (v1 / vm).arg();
        if a.abs() <= std::f64::consts::FRAC_PI_2 && b.abs() <= std::f64::consts::FRAC_PI_2 {
            return Ok(a + b);
        }
    }
    if depth >= 48 {
        return Err(Error::WindowTooSmall(format!(
            "winding refinement did not converge near {} + {}i (a root may sit \
             on the window boundary)",
            z0.re, z0.im
        )));
    }
    let zm = 0.5 * (z0 + z1);
    let vm = det_characteristic(measure, zm);
    Ok(edge_phase_change(measure, z0, v0, zm, vm, depth + 1)?
        + edge_phase_change(measure, zm, vm, z1, v1, depth + 1)?)
}

/// Number of characteristic roots inside `rect`, counted with multiplicity
/// by the argument principle.
fn count_roots(measure: &MatrixLagMeasure, rect: &Rect) -> Result<usize> {
    let corners = [
        Complex64::new(rect.re_min, rect.im_min),
        Complex64::new(rect.re_max, rect.im_min),
        Complex64::new(rect.re_max, rect.im_max),
        Complex64::new(rect.re_min, rect.im_max),
    ];
    let values: Vec<Complex64> = corners
        .iter()
        .map(|&z| det_characteristic(measure, z))
        .collect();
    let mut total = 0.0;
    for i in 0..4 {
        let j = (i + 1) % 4;
        total += edge_phase_change(measure, corners[i], values[i], corners[j], values[j], 0)?;
    }
    let winding = total / (2.0 * std::f64::consts::PI);
    let count = winding.round();
    if (winding - count).abs() > 0.25 || count < -0.1 {
        return Err(Error::WindowTooSmall(format!(
            "non-integer winding number {winding:.3} on census cell \
             [{}, {}] x [{}, {}]",
            rect.re_min, rect.re_max, rect.im_min, rect.im_max
        )));
    }
    Ok(count as usize)
}

/// Newton iteration for a characteristic root, using the logarithmic
/// derivative `det'/det = tr(Delta^{-1} Delta')`.
fn polish_root(measure: &MatrixLagMeasure, start: Complex64) -> Result<Complex64> {
    let mut z = start;
    for _ in 0..80 {
        let (delta, dprime) = characteristic_matrix(measure, z);
        let lu = delta.lu();
        let Some(x) = lu.solve(&dprime) else {
            // Exactly singular: we are on the root to machine precision.
            break;
        };
        let trace: Complex64 = (0..x.nrows()).map(|i| x[(i, i)]).sum();
        if trace.norm() == 0.0 {
            break;
        }
        let step = Complex64::new(1.0, 0.0) / trace;
        z -= step;
        if step.norm() <= 1e-14 * (1.0 + z.norm()) {
            break;
        }
    }
    let residual = scaled_det(measure, z);
    if residual > POLISH_DET_BOUND {
        return Err(Error::ResidualTooLarge {
            what: format!("Newton polish of characteristic root near {} + {}i", z.re, z.im),
            residual,
            bound: POLISH_DET_BOUND,
        });
    }
    Ok(z)
}

fn isolate_roots(
    measure: &MatrixLagMeasure,
    rect: Rect,
    cells: &mut Vec<(Rect, usize)>,
    roots: &mut Vec<Complex64>,
    budget: &mut usize,
) -> Result<()> {
    if *budget == 0 {
        return Err(Error::WindowTooSmall(
            "root census exceeded its subdivision budget".into(),
        ));
    }
    *budget -= 1;
    let count = count_roots(measure, &rect)?;
    if count == 0 {
        return Ok(());
    }
    let scale = 1.0 + rect.center().norm();
    if count == 1 && rect.diameter() <= 0.05 * scale {
        let root = polish_root(measure, rect.center())?;
        if !rect.contains(root, rect.diameter()) {
            return Err(Error::WindowTooSmall(format!(
                "polished root {} + {}i escaped its isolating cell",
                root.re, root.im
            )));
        }
        cells.push((rect, count));
        roots.push(root);
        return Ok(());
    }
    if rect.diameter() <= 1e-9 * scale {
        return Err(Error::WindowTooSmall(format!(
            "{count} roots cluster below resolution near {} + {}i",
            rect.center().re,
            rect.center().im
        )));
    }
    cells.push((rect, count));
    let (a, b) = if rect.re_max - rect.re_min >= rect.im_max - rect.im_min {
        let mid = 0.5 * (rect.re_min + rect.re_max);
        (Rect { re_max: mid, ..rect }, Rect { re_min: mid, ..rect })
    } else {
        let mid = 0.5 * (rect.im_min + rect.im_max);
        (Rect { im_max: mid, ..rect }, Rect { im_min: mid, ..rect })
    };
    isolate_roots(measure, a, cells, roots, budget)?;
    isolate_roots(measure, b, cells, roots, budget)
}

/// Runs the root census on the window described by `scan`.
///
/// Returns every polished root inside the window together with the isolating
/// cells. Complex roots appear once (upper half-plane representative); real
/// roots appear as themselves.
pub fn root_census(
    measure: &MatrixLagMeasure,
    scan: &ScanConfig,
) -> Result<(Vec<Complex64>, CensusReport)> {
    let window = scan.window(measure);
    let mut cells = Vec::new();
    let mut roots = Vec::new();
    let mut budget = 4096usize;
    isolate_roots(measure, window, &mut cells, &mut roots, &mut budget)?;
    // Merge a conjugate pair straddling the real axis (both inside the
    // window only when |Im| is below its bottom margin) into one real root.
    let mut merged: Vec<Complex64> = Vec::new();
    for root in roots {
        if root.im.abs() <= 2.0 * WINDOW_MARGIN {
            let real = Complex64::new(root.re, 0.0);
            if merged
                .iter()
                .any(|r| (r - real).norm() <= 1e-6 * (1.0 + real.norm()))
            {
                continue;
            }
            merged.push(real);
        } else {
            merged.push(root);
        }
    }
    merged.sort_by(|a, b| {
        b.re.partial_cmp(&a.re)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.im.partial_cmp(&b.im).unwrap_or(std::cmp::Ordering::Equal))
    });
    let report = CensusReport {
        window,
        subrectangles: cells,
        roots: merged.iter().map(|z| (z.re, z.im)).collect(),
    };
    Ok((merged, report))
}

/// Locates the critical frequency `omega_c` of a system at the verge of
/// oscillatory instability and verifies the spectral assumption:
///
/// * exactly one root with `|Re lambda| <= tol_imag` inside the window, at
///   a positive frequency (its conjugate lies below the window);
/// * every other root in the window has `Re lambda <= tol_real`.
pub fn locate_critical_pair(
    measure: &MatrixLagMeasure,
    scan: &ScanConfig,
) -> Result<(f64, CensusReport)> {
    let (roots, report) = root_census(measure, scan)?;
    let mut critical: Vec<Complex64> = Vec::new();
    let mut offenders: Vec<(f64, f64)> = Vec::new();
    for &root in &roots {
        if root.re.abs() <= scan.tol_imag && root.im > scan.tol_imag {
            critical.push(root);
        } else if root.re > scan.tol_real {
            offenders.push((root.re, root.im));
        }
    }
    if !offenders.is_empty() {
        return Err(Error::UnstableExtraRoots { count: offenders.len(), roots: offenders });
    }
    if critical.is_empty() {
        let closest = roots
            .iter()
            .min_by(|a, b| {
                a.re.abs()
                    .partial_cmp(&b.re.abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .copied()
            .unwrap_or_default();
        return Err(Error::NoCriticalPair { closest_re: closest.re, closest_im: closest.im });
    }
    if critical.len() > 1 {
        return Err(Error::UnstableExtraRoots {
            count: critical.len(),
            roots: critical.iter().map(|z| (z.re, z.im)).collect(),
        });
    }
    Ok((critical[0].im, report))
}

/// Critical eigendata of a system at the verge of oscillatory instability.
///
/// * `d` spans the kernel of `Delta(i omega_c)` (column), scaled so its
///   first significant component is exactly one — for a second-order system
///   in companion form this is the familiar `d = (1, i omega_c)`. The scale
///   of `d` fixes the meaning of the energy-like level `hbar` (the orbit at
///   level `hbar` has first-component amplitude `sqrt(2 hbar)`), so it is
///   part of the public contract, not a free choice;
/// * `d2` spans the left kernel (row, stored as its entries), normalized to
///   unit norm with largest-modulus entry real positive. This choice is
///   immaterial: `c` compensates, leaving `psi_hat` invariant;
/// * `c = 1 / (d2 Delta'(i omega_c) d)` normalizes the adjoint pair so the
///   bilinear pairing of eigenvector and covector is exactly one;
/// * `psi_hat` holds the covector values at zero: row 1 is `c * d2`, row 2
///   its conjugate.
#[derive(Debug, Clone)]
pub struct SpectralData {
    /// Critical frequency `omega_c > 0`.
    pub omega_c: f64,
    /// Right null vector of `Delta(i omega_c)`.
    pub d: DVector<Complex64>,
    /// Left null row vector of `Delta(i omega_c)` (entries).
    pub d2: DVector<Complex64>,
    /// Normalization constant `1 / (d2 Delta'(i omega_c) d)`.
    pub c: Complex64,
    /// Covector values at zero; row `i` is `psi_hat[i]` with
    /// `psi_hat[1] = conj(psi_hat[0])`.
    pub psi_hat: [DVector<Complex64>; 2],
    /// Rotation period `2 pi / omega_c`.
    pub period: f64,
}

impl SpectralData {
    /// State dimension.
    pub fn n(&self) -> usize {
        self.d.len()
    }

    /// Eigenfunction value `Phi_1(theta) = d exp(i omega_c theta)`.
    pub fn phi1(&self, theta: f64) -> DVector<Complex64> {
        let w = Complex64::from_polar(1.0, self.omega_c * theta);
        self.d.map(|x| x * w)
    }

    /// Row covector `E_t = exp(-i omega_c t) psi_hat_1 + c.c.`, the real
    /// covector pairing noise directions with the energy-like coordinate
    /// along the critical orbit (up to the orbit's amplitude factor).
    pub fn rotating_covector(&self, t: f64) -> DVector<f64> {
        let w = Complex64::from_polar(1.0, -self.omega_c * t);
        self.psi_hat[0].map(|p| 2.0 * (p * w).re)
    }
}

fn phase_fix(mut v: DVector<Complex64>) -> DVector<Complex64> {
    let norm = v.norm();
    v /= Complex64::new(norm, 0.0);
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].norm() > v[best].norm() {
            best = i;
        }
    }
    let phase = v[best] / Complex64::new(v[best].norm(), 0.0);
    v.map(|x| x * phase.conj())
}

/// Scales `v` so its first component of significant modulus equals one.
fn leading_one(v: DVector<Complex64>) -> DVector<Complex64> {
    let max = v.iter().map(|x| x.norm()).fold(0.0, f64::max);
    let lead = v
        .iter()
        .copied()
        .find(|x| x.norm() >= 1e-8 * max)
        .expect("null vector has a nonzero entry");
    v.map(|x| x / lead)
}

/// Builds the critical eigendata at a located frequency.
///
/// Fails with [`Error::DegenerateRoot`] when the kernel of
/// `Delta(i omega_c)` is not one-dimensional (the two smallest singular
/// values are not separated), and with a residual error when the null
/// vectors or the closed-form biorthogonality checks are off.
pub fn eigendata(measure: &MatrixLagMeasure, omega_c: f64) -> Result<SpectralData> {
    let lambda = Complex64::new(0.0, omega_c);
    let (delta, dprime) = characteristic_matrix(measure, lambda);
    let n = measure.n();
    let svd = delta.clone().svd(true, true);
    let sv = &svd.singular_values;
    let mut idx: Vec<usize> = (0..sv.len()).collect();
    idx.sort_by(|&a, &b| sv[a].partial_cmp(&sv[b]).unwrap_or(std::cmp::Ordering::Equal));
    let i_min = idx[0];
    let scale = sv[idx[sv.len() - 1]].max(f64::MIN_POSITIVE);
    if sv.len() > 1 {
        let ratio = sv[i_min] / sv[idx[1]].max(f64::MIN_POSITIVE);
        if ratio > DEGENERACY_RATIO {
            return Err(Error::DegenerateRoot { ratio, threshold: DEGENERACY_RATIO });
        }
    }
    let v_t = svd.v_t.as_ref().expect("SVD with vectors");
    let u = svd.u.as_ref().expect("SVD with vectors");
    let d = leading_one(DVector::from_fn(n, |j, _| v_t[(i_min, j)].conj()));
    let d2 = phase_fix(DVector::from_fn(n, |j, _| u[(j, i_min)].conj()));

    // Null residuals, measured against the scale of the matrix pencil and
    // of the (not necessarily unit-norm) null vectors.
    let dprime_norm = dprime.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let right_res = (&delta * &d).norm() / d.norm();
    let left_res = {
        let mut acc = 0.0;
        for j in 0..n {
            let mut s = Complex64::default();
            for i in 0..n {
                s += d2[i] * delta[(i, j)];
            }
            acc += s.norm_sqr();
        }
        acc.sqrt()
    };
    let bound = 1e-10 * dprime_norm.max(scale);
    if right_res > bound || left_res > bound {
        return Err(Error::ResidualTooLarge {
            what: format!("null vectors of the characteristic matrix at omega = {omega_c}"),
            residual: right_res.max(left_res),
            bound,
        });
    }

    // c = 1 / (d2 Delta'(i omega_c) d)
    let mut denom = Complex64::default();
    for i in 0..n {
        let mut row = Complex64::default();
        for j in 0..n {
            row += dprime[(i, j)] * d[j];
        }
        denom += d2[i] * row;
    }
    if denom.norm() == 0.0 {
        return Err(Error::DegenerateRoot { ratio: f64::INFINITY, threshold: DEGENERACY_RATIO });
    }
    let c = Complex64::new(1.0, 0.0) / denom;
    let psi1 = d2.map(|x| x * c);
    let psi2 = psi1.map(|x| x.conj());
    let spec = SpectralData {
        omega_c,
        d,
        d2,
        c,
        psi_hat: [psi1, psi2],
        period: 2.0 * std::f64::consts::PI / omega_c,
    };

    // Defensive closed-form biorthogonality check: the pairing of covector 1
    // with eigenfunction 1 must be exactly one and with eigenfunction 2 zero.
    let on_diag = pairing_exponential(
        &spec,
        measure,
        1,
        &spec.d,
        Complex64::new(0.0, omega_c),
    );
    let off_diag = pairing_exponential(
        &spec,
        measure,
        1,
        &spec.d.map(|x| x.conj()),
        Complex64::new(0.0, -omega_c),
    );
    let bi_res = (on_diag - Complex64::new(1.0, 0.0)).norm().max(off_diag.norm());
    if bi_res > 1e-8 {
        return Err(Error::ResidualTooLarge {
            what: "closed-form biorthogonality of the critical eigenpair".into(),
            residual: bi_res,
            bound: 1e-8,
        });
    }
    Ok(spec)
}

/// One-call convenience: census with the default window, then eigendata.
pub fn locate_and_build(measure: &MatrixLagMeasure) -> Result<SpectralData> {
    let (omega_c, _) = locate_critical_pair(measure, &ScanConfig::default())?;
    eigendata(measure, omega_c)
}

/// Closed-form bilinear pairing of covector `which` (1 or 2) with the
/// exponential segment `theta -> v exp(mu theta)`:
///
/// ```text
/// <psi, v e^(mu .)> = psi(0) v + sum_k (psi_hat A_k v) e^(i w theta_k)
///                     * integral_(theta_k)^0 e^((mu - i w) s) ds
/// ```
///
/// with `w = +omega_c` for covector 1 and `-omega_c` for covector 2.
pub fn pairing_exponential(
    spec: &SpectralData,
    measure: &MatrixLagMeasure,
    which: usize,
    v: &DVector<Complex64>,
    mu: Complex64,
) -> Complex64 {
    let psi = &spec.psi_hat[which - 1];
    let w = if which == 1 { spec.omega_c } else { -spec.omega_c };
    let n = measure.n();
    let mut total = Complex64::default();
    for i in 0..n {
        total += psi[i] * v[i];
    }
    let alpha = mu - Complex64::new(0.0, w);
    for (theta, a) in measure.terms() {
        if *theta == 0.0 {
            continue;
        }
        // psi_hat A_k v
        let mut pav = Complex64::default();
        for i in 0..n {
            let mut row = Complex64::default();
            for j in 0..n {
                row += a[(i, j)] * v[j];
            }
            pav += psi[i] * row;
        }
        let phase = Complex64::from_polar(1.0, w * theta);
        let integral = if alpha.norm() < 1e-14 {
            Complex64::new(-theta, 0.0)
        } else {
            (Complex64::new(1.0, 0.0) - (alpha * *theta).exp()) / alpha
        };
        total += pav * phase * integral;
    }
    total
}

/// Bilinear pairing of covector `which` with a sampled segment, by composite
/// trapezoid quadrature on the segment's grid (plus the interpolated value at
/// each lag endpoint that falls between nodes).
///
/// A jump at zero contributes only through the boundary term
/// `psi(0) seg(0+)`; the integrals see the continuous part (the jump sits on
/// a set of measure zero).
pub fn bilinear_pairing(
    spec: &SpectralData,
    measure: &MatrixLagMeasure,
    which: usize,
    seg: &HistorySegment,
) -> Result<Complex64> {
    if which != 1 && which != 2 {
        return Err(Error::Domain(format!("covector index {which} must be 1 or 2")));
    }
    if seg.n() != measure.n() {
        return Err(Error::Domain(format!(
            "segment dimension {} does not match measure dimension {}",
            seg.n(),
            measure.n()
        )));
    }
    let psi = &spec.psi_hat[which - 1];
    let w = if which == 1 { spec.omega_c } else { -spec.omega_c };
    let n = measure.n();
    let span = seg.span();
    let h = seg.grid_step();
    let nodes = seg.num_nodes();

    // psi(0) seg(0+): the only place the jump value enters.
    let boundary = seg.boundary();
    let mut total = Complex64::default();
    for i in 0..n {
        total += psi[i] * boundary[i];
    }

    let mut value = vec![0.0; n];
    let integrand = |psi: &DVector<Complex64>,
                     a: &DMatrix<f64>,
                     s: f64,
                     x: &[f64]|
     -> Complex64 {
        // psi(s - theta_k) A_k x with psi(u) = psi_hat e^(-i w u); the
        // phase e^(i w theta_k) is folded in by the caller.
        let mut pax = Complex64::default();
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += a[(i, j)] * x[j];
            }
            pax += psi[i] * row;
        }
        pax * Complex64::from_polar(1.0, -w * s)
    };

    for (theta, a) in measure.terms() {
        if *theta >= 0.0 {
            continue;
        }
        if *theta < -span - 1e-9 * span.max(1.0) {
            return Err(Error::LagOutsideSpan { lag: *theta, span_min: -span });
        }
        let phase_k = Complex64::from_polar(1.0, w * theta);
        // Trapezoid over [theta_k, 0] on the segment grid: the first node at
        // or after theta_k, all later nodes, and theta_k itself when it falls
        // between nodes.
        let start = (theta + span) / h;
        let first = start.ceil();
        let first = if (start - start.round()).abs() <= 1e-9 * start.abs().max(1.0) {
            start.round()
        } else {
            first
        };
        let first_idx = (first.max(0.0) as usize).min(nodes - 1);
        let mut acc = Complex64::default();
        let mut prev_s = *theta;
        seg.eval_into(*theta, &mut value)?;
        let mut prev_f = integrand(psi, a, *theta, &value);
        for i in first_idx..nodes {
            let s = seg.theta(i).min(0.0);
            if s <= prev_s + 1e-15 {
                continue;
            }
            let f = integrand(psi, a, s, seg.node(i));
            acc += (s - prev_s) * 0.5 * (prev_f + f);
            prev_s = s;
            prev_f = f;
        }
        total += phase_k * acc;
    }
    Ok(total)
}

/// Critical-pair coordinate `z_1 = <psi_1, seg>` of a real segment, with the
/// grid's discretization bias removed.
///
/// The raw trapezoid pairings of the two covectors are corrected by the
/// 2x2 Gram matrix of the covectors against the eigenfunctions *sampled on
/// the same grid with the same quadrature*, so projecting a segment and
/// re-projecting its residual gives zero to floating-point precision rather
/// than to quadrature accuracy.
pub fn critical_coordinate(
    spec: &SpectralData,
    measure: &MatrixLagMeasure,
    seg: &HistorySegment,
) -> Result<Complex64> {
    let n = seg.n();
    let span = seg.span();
    let nodes = seg.num_nodes();
    let omega = spec.omega_c;

    // Sample the real and imaginary parts of Phi_1 on the segment's grid and
    // push them through the same trapezoid pairing as the segment itself.
    let mut re_part = Vec::with_capacity(nodes * n);
    let mut im_part = Vec::with_capacity(nodes * n);
    for i in 0..nodes {
        let theta = (i as f64) * seg.grid_step() - span;
        let w = Complex64::from_polar(1.0, omega * theta.min(0.0));
        for c in 0..n {
            let v = spec.d[c] * w;
            re_part.push(v.re);
            im_part.push(v.im);
        }
    }
    let phi_re = HistorySegment::new(n, seg.grid_step(), re_part)?;
    let phi_im = HistorySegment::new(n, seg.grid_step(), im_part)?;

    // Gram entries: G[i][j] = <psi_i, Phi_j> on this grid. Row 2 and column 2
    // follow from conjugation symmetry for real-sampled parts.
    let p1_re = bilinear_pairing(spec, measure, 1, &phi_re)?;
    let p1_im = bilinear_pairing(spec, measure, 1, &phi_im)?;
    let g11 = p1_re + Complex64::i() * p1_im; // <psi_1, Phi_1>
    let g12 = p1_re - Complex64::i() * p1_im; // <psi_1, Phi_2>
    let g21 = g12.conj();
    let g22 = g11.conj();

    let z1_raw = bilinear_pairing(spec, measure, 1, seg)?;
    let z2_raw = z1_raw.conj();

    // Solve the 2x2 system G z = z_raw.
    let det = g11 * g22 - g12 * g21;
    if det.norm() < 1e-12 {
        return Err(Error::DegenerateRoot { ratio: det.norm(), threshold: 1e-12 });
    }
    Ok((g22 * z1_raw - g12 * z2_raw) / det)
}

/// Splits a real segment into critical-pair coordinates and the stable
/// remainder: `seg = 2 Re(z_1 Phi_1) + stable`.
///
/// The coordinates are Gram-corrected (see [`critical_coordinate`]); the
/// second coordinate is the conjugate of the first by construction.
pub fn project_critical(
    spec: &SpectralData,
    measure: &MatrixLagMeasure,
    seg: &HistorySegment,
) -> Result<([Complex64; 2], HistorySegment)> {
    let z1 = critical_coordinate(spec, measure, seg)?;
    let n = seg.n();
    let critical = HistorySegment::sample(n, seg.span(), seg.num_nodes(), |theta, out| {
        let w = Complex64::from_polar(1.0, spec.omega_c * theta);
        for (o, dc) in out.iter_mut().zip(spec.d.iter()) {
            *o = 2.0 * (z1 * dc * w).re;
        }
    })?;
    let mut stable = seg.clone();
    stable.axpy(-1.0, &critical)?;
    Ok(([z1, z1.conj()], stable))
}

/// The critical orbit segment at energy-like level `hbar` and phase time
/// `t`: `theta -> sqrt(2 hbar) Re(d exp(i omega_c (t + theta)))`, sampled on
/// `nodes` nodes over `[-span, 0]`.
pub fn critical_orbit(
    spec: &SpectralData,
    span: f64,
    hbar: f64,
    t: f64,
    nodes: usize,
) -> Result<HistorySegment> {
    if hbar < 0.0 {
        return Err(Error::Domain(format!("orbit level {hbar} must be non-negative")));
    }
    let amp = (2.0 * hbar).sqrt();
    let n = spec.n();
    HistorySegment::sample(n, span, nodes, |theta, out| {
        let w = Complex64::from_polar(1.0, spec.omega_c * (t + theta));
        for (o, dc) in out.iter_mut().zip(spec.d.iter()) {
            *o = amp * (dc * w).re;
        }
    })
}

/// Critical data for a system whose marginal mode is a simple root at zero
/// (a conserved-coordinate verge rather than an oscillatory one).
///
/// All quantities are real: `d` spans the kernel of `Delta(0)`, `d2` the
/// left kernel, `c = 1/(d2 Delta'(0) d)` and `psi_hat = c d2`. The
/// energy-like coordinate of a segment is the plain pairing `<psi, seg>`,
/// which may take either sign.
#[derive(Debug, Clone)]
pub struct ZeroRootData {
    pub d: DVector<f64>,
    pub d2: DVector<f64>,
    pub c: f64,
    pub psi_hat: DVector<f64>,
}

/// Locates and validates a simple zero root: `det Delta(0) = 0`, the kernel
/// one-dimensional, and no other census root with real part above
/// `tol_real`.
pub fn locate_zero_root(
    measure: &MatrixLagMeasure,
    scan: &ScanConfig,
) -> Result<(ZeroRootData, CensusReport)> {
    let det0 = scaled_det(measure, Complex64::default());
    if det0 > 1e-8 {
        return Err(Error::NoZeroRoot { det_abs: det0 });
    }
    let (roots, report) = root_census(measure, scan)?;
    let mut offenders = Vec::new();
    let mut found_zero = false;
    for &root in &roots {
        if root.norm() <= 1e-7 {
            found_zero = true;
        } else if root.re > scan.tol_real {
            offenders.push((root.re, root.im));
        }
    }
    if !found_zero {
        return Err(Error::NoZeroRoot { det_abs: det0 });
    }
    if !offenders.is_empty() {
        return Err(Error::UnstableExtraRoots { count: offenders.len(), roots: offenders });
    }

    let n = measure.n();
    let mut delta0 = DMatrix::<f64>::zeros(n, n);
    let mut dprime0 = DMatrix::<f64>::identity(n, n);
    for (theta, a) in measure.terms() {
        for i in 0..n {
            for j in 0..n {
                delta0[(i, j)] -= a[(i, j)];
                dprime0[(i, j)] -= theta * a[(i, j)];
            }
        }
    }
    let svd = delta0.clone().svd(true, true);
    let sv = &svd.singular_values;
    let mut idx: Vec<usize> = (0..sv.len()).collect();
    idx.sort_by(|&a, &b| sv[a].partial_cmp(&sv[b]).unwrap_or(std::cmp::Ordering::Equal));
    let i_min = idx[0];
    if sv.len() > 1 && sv[i_min] / sv[idx[1]].max(f64::MIN_POSITIVE) > DEGENERACY_RATIO {
        return Err(Error::DegenerateRoot {
            ratio: sv[i_min] / sv[idx[1]],
            threshold: DEGENERACY_RATIO,
        });
    }
    let v_t = svd.v_t.as_ref().expect("SVD with vectors");
    let u = svd.u.as_ref().expect("SVD with vectors");
    let sign_fix = |mut v: DVector<f64>| -> DVector<f64> {
        v /= v.norm();
        let mut best = 0;
        for i in 1..v.len() {
            if v[i].abs() > v[best].abs() {
                best = i;
            }
        }
        if v[best] < 0.0 {
            v = -v;
        }
        v
    };
    // As in the oscillatory case, the scale of d is part of the contract
    // (it fixes the level coordinate); the scale of d2 is compensated by c.
    let d = {
        let raw = DVector::<f64>::from_fn(n, |j, _| v_t[(i_min, j)]);
        let max = raw.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let lead = raw
            .iter()
            .copied()
            .find(|x| x.abs() >= 1e-8 * max)
            .expect("null vector has a nonzero entry");
        raw.map(|x| x / lead)
    };
    let d2 = sign_fix(DVector::from_fn(n, |j, _| u[(j, i_min)]));
    let denom = (0..n)
        .map(|i| d2[i] * (0..n).map(|j| dprime0[(i, j)] * d[j]).sum::<f64>())
        .sum::<f64>();
    if denom.abs() < 1e-12 {
        return Err(Error::DegenerateRoot { ratio: f64::INFINITY, threshold: DEGENERACY_RATIO });
    }
    let c = 1.0 / denom;
    let psi_hat = d2.map(|x| x * c);
    Ok((ZeroRootData { d, d2, c, psi_hat }, report))
}

/// Pairing of the zero-root covector with a segment (real trapezoid
/// analogue of [`bilinear_pairing`]); this *is* the conserved coordinate of
/// the zero-root reduction.
pub fn zero_pairing(
    zero: &ZeroRootData,
    measure: &MatrixLagMeasure,
    seg: &HistorySegment,
) -> Result<f64> {
    let n = measure.n();
    if seg.n() != n {
        return Err(Error::Domain(format!(
            "segment dimension {} does not match measure dimension {n}",
            seg.n()
        )));
    }
    let boundary = seg.boundary();
    let mut total = 0.0;
    for (psi, b) in zero.psi_hat.iter().zip(boundary) {
        total += psi * b;
    }
    let span = seg.span();
    let h = seg.grid_step();
    let nodes = seg.num_nodes();
    let mut value = vec![0.0; n];
    for (theta, a) in measure.terms() {
        if *theta >= 0.0 {
            continue;
        }
        let pax = |x: &[f64]| -> f64 {
            let mut acc = 0.0;
            for i in 0..n {
                let mut row = 0.0;
                for j in 0..n {
                    row += a[(i, j)] * x[j];
                }
                acc += zero.psi_hat[i] * row;
            }
            acc
        };
        let start = (theta + span) / h;
        let first = if (start - start.round()).abs() <= 1e-9 * start.abs().max(1.0) {
            start.round()
        } else {
            start.ceil()
        };
        let first_idx = (first.max(0.0) as usize).min(nodes - 1);
        seg.eval_into(*theta, &mut value)?;
        let mut prev_s = *theta;
        let mut prev_f = pax(&value);
        let mut acc = 0.0;
        for i in first_idx..nodes {
            let s = seg.theta(i).min(0.0);
            if s <= prev_s + 1e-15 {
                continue;
            }
            let f = pax(seg.node(i));
            acc += (s - prev_s) * 0.5 * (prev_f + f);
            prev_s = s;
            prev_f = f;
        }
        total += acc;
    }
    Ok(total)
}
