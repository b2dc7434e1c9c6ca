//! History segments, trajectories and explicit time stepping for delay
//! systems, with or without stochastic forcing.
//!
//! The integrators use the explicit Euler(–Maruyama) scheme on a uniform grid
//! whose step divides the delay span, so every delayed read lands either on a
//! grid node (exact) or between two nodes (linear interpolation). History is
//! kept in a ring buffer of `N + 1` frames where `N = span / dt`, so memory
//! does not grow with integration time unless a caller asks for stored
//! trajectories.
//!
//! Determinism: every stochastic trajectory is driven by a counter-based
//! stream cipher generator seeded from a single `u64`, so reruns with the
//! same seed are bit-identical, and ensemble members get decorrelated streams
//! through an avalanche mix of `(base_seed, index)`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{MatrixLagMeasure, NoiseKind, NoiseModel, PerturbedModel, Perturbation};
use crate::spectrum::SpectralData;

/// Relative tolerance for "this time is a grid node" decisions.
const GRID_SNAP_TOL: f64 = 1e-9;

/// Magnitude treated as numerical overflow during integration.
const OVERFLOW_CAP: f64 = 1e150;

/// A function on `[-span, 0]` sampled on a uniform grid, with an optional
/// separate value *at* zero.
///
/// Node `i` sits at `theta_i = -span + i * grid_step`; the last node carries
/// the limit of the continuous part from the left at zero. When
/// `jump_at_zero` is set, the segment's value at exactly `theta = 0` is the
/// jump value instead — the initial data of fundamental solutions has this
/// shape. Integrals over the segment never see the jump (it sits on a set of
/// measure zero); point reads at zero do.
#[derive(Debug, Clone, PartialEq)]
pub struct HistorySegment {
    n: usize,
    grid_step: f64,
    values: Vec<f64>,
    jump_at_zero: Option<Vec<f64>>,
}

impl HistorySegment {
    /// Builds a segment from node values laid out node-major
    /// (`values[i * n + c]` is component `c` at node `i`).
    pub fn new(n: usize, grid_step: f64, values: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("segment dimension must be positive".into()));
        }
        if !grid_step.is_finite() || grid_step <= 0.0 {
            return Err(Error::Config(format!("grid step {grid_step} must be positive")));
        }
        if values.len() % n != 0 || values.len() / n < 2 {
            return Err(Error::Config(format!(
                "segment needs at least 2 nodes of dimension {n}, got {} values",
                values.len()
            )));
        }
        Ok(HistorySegment { n, grid_step, values, jump_at_zero: None })
    }

    /// Samples `fill(theta, node_values)` on a uniform grid of `nodes` nodes
    /// spanning `[-span, 0]`.
    pub fn sample(
        n: usize,
        span: f64,
        nodes: usize,
        mut fill: impl FnMut(f64, &mut [f64]),
    ) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::Config("segment needs at least 2 nodes".into()));
        }
        if !span.is_finite() || span <= 0.0 {
            return Err(Error::Config(format!("segment span {span} must be positive")));
        }
        let grid_step = span / (nodes - 1) as f64;
        let mut values = vec![0.0; nodes * n];
        for i in 0..nodes {
            let theta = i as f64 * grid_step - span;
            fill(theta.min(0.0), &mut values[i * n..(i + 1) * n]);
        }
        HistorySegment::new(n, grid_step, values)
    }

    /// The zero segment.
    pub fn zero(n: usize, span: f64, nodes: usize) -> Result<Self> {
        HistorySegment::sample(n, span, nodes, |_, out| out.fill(0.0))
    }

    /// Attaches a separate value at `theta = 0`.
    pub fn with_jump_at_zero(mut self, value: Vec<f64>) -> Result<Self> {
        if value.len() != self.n {
            return Err(Error::Config(format!(
                "jump value has dimension {}, expected {}",
                value.len(),
                self.n
            )));
        }
        self.jump_at_zero = Some(value);
        Ok(self)
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of grid nodes.
    pub fn num_nodes(&self) -> usize {
        self.values.len() / self.n
    }

    /// Grid spacing.
    pub fn grid_step(&self) -> f64 {
        self.grid_step
    }

    /// History span `r = (num_nodes - 1) * grid_step`.
    pub fn span(&self) -> f64 {
        (self.num_nodes() - 1) as f64 * self.grid_step
    }

    /// Position of node `i`.
    pub fn theta(&self, i: usize) -> f64 {
        i as f64 * self.grid_step - self.span()
    }

    /// Continuous-part values at node `i` (the last node is the limit from
    /// the left at zero even when a jump is present).
    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// The separate value at zero, when set.
    pub fn jump_at_zero(&self) -> Option<&[f64]> {
        self.jump_at_zero.as_deref()
    }

    /// The segment's value at `theta = 0`: the jump value when present,
    /// otherwise the last node.
    pub fn boundary(&self) -> &[f64] {
        match &self.jump_at_zero {
            Some(v) => v,
            None => self.node(self.num_nodes() - 1),
        }
    }

    /// Evaluates the segment at `theta` in `[-span, 0]` by linear
    /// interpolation of the continuous part, exact at grid nodes. At
    /// `theta = 0` this returns [`HistorySegment::boundary`].
    pub fn eval_into(&self, theta: f64, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.n);
        let span = self.span();
        let scale = span.max(1.0);
        if theta > GRID_SNAP_TOL * scale || theta < -span - GRID_SNAP_TOL * scale {
            return Err(Error::LagOutsideSpan { lag: theta, span_min: -span });
        }
        if theta >= -GRID_SNAP_TOL * scale {
            out.copy_from_slice(self.boundary());
            return Ok(());
        }
        let x = (theta + span) / self.grid_step;
        let rounded = x.round();
        let (i, frac) = if (x - rounded).abs() <= GRID_SNAP_TOL * x.abs().max(1.0) {
            (rounded as usize, 0.0)
        } else {
            (x.floor() as usize, x - x.floor())
        };
        let i = i.min(self.num_nodes() - 1);
        if frac == 0.0 {
            out.copy_from_slice(self.node(i));
        } else {
            let a = self.node(i);
            let b = self.node(i + 1);
            for c in 0..self.n {
                out[c] = (1.0 - frac) * a[c] + frac * b[c];
            }
        }
        Ok(())
    }

    /// Supremum norm over grid nodes and the jump value.
    pub fn sup_norm(&self) -> f64 {
        let nodes = self.values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        match &self.jump_at_zero {
            Some(j) => j.iter().fold(nodes, |m, &v| m.max(v.abs())),
            None => nodes,
        }
    }

    /// In-place `self += a * other`; the grids must match exactly. When
    /// either side carries a jump, the result's jump combines the values at
    /// zero of both sides.
    pub fn axpy(&mut self, a: f64, other: &HistorySegment) -> Result<()> {
        if self.n != other.n
            || self.num_nodes() != other.num_nodes()
            || (self.grid_step - other.grid_step).abs()
                > GRID_SNAP_TOL * self.grid_step.max(other.grid_step)
        {
            return Err(Error::Domain("segment grids do not match".into()));
        }
        if self.jump_at_zero.is_some() || other.jump_at_zero.is_some() {
            let combined: Vec<f64> = self
                .boundary()
                .iter()
                .zip(other.boundary())
                .map(|(s, o)| s + a * o)
                .collect();
            self.jump_at_zero = Some(combined);
        }
        for (s, o) in self.values.iter_mut().zip(other.values.iter()) {
            *s += a * o;
        }
        Ok(())
    }
}

/// A solution path on a uniform time grid, including its initial history.
///
/// Frame `j` holds the state at `t0 + j * dt`. Trajectories produced by the
/// integrators start at `t0 = -span` so that any window `[t - span, t]` can
/// be extracted as a [`HistorySegment`].
#[derive(Debug, Clone)]
pub struct Trajectory {
    t0: f64,
    dt: f64,
    n: usize,
    values: Vec<f64>,
    /// Seed that produced the noise path (0 for deterministic runs).
    pub seed: u64,
    /// Driving process tag.
    pub noise_kind: NoiseKind,
    /// Time at which integration aborted on NaN/overflow, if it did.
    pub flagged_at: Option<f64>,
}

impl Trajectory {
    fn from_parts(
        t0: f64,
        dt: f64,
        n: usize,
        values: Vec<f64>,
        seed: u64,
        noise_kind: NoiseKind,
        flagged_at: Option<f64>,
    ) -> Self {
        Trajectory { t0, dt, n, values, seed, noise_kind, flagged_at }
    }

    /// Time of the first stored frame.
    pub fn t0(&self) -> f64 {
        self.t0
    }

    /// Spacing between stored frames.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored frames.
    pub fn num_frames(&self) -> usize {
        self.values.len() / self.n
    }

    /// Time of frame `j`.
    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }

    /// Time of the last stored frame.
    pub fn t_end(&self) -> f64 {
        self.time(self.num_frames() - 1)
    }

    /// State at frame `j`.
    pub fn frame(&self, j: usize) -> &[f64] {
        &self.values[j * self.n..(j + 1) * self.n]
    }

    /// Component `c` at frame `j`.
    pub fn component(&self, j: usize, c: usize) -> f64 {
        self.values[j * self.n + c]
    }

    /// Linear interpolation of the path at time `t`, exact on frames.
    pub fn value_at(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let x = (t - self.t0) / self.dt;
        let last = (self.num_frames() - 1) as f64;
        if x < -GRID_SNAP_TOL || x > last * (1.0 + GRID_SNAP_TOL) + GRID_SNAP_TOL {
            return Err(Error::Domain(format!(
                "time {t} outside trajectory range [{}, {}]",
                self.t0,
                self.t_end()
            )));
        }
        let rounded = x.round();
        if (x - rounded).abs() <= GRID_SNAP_TOL * x.abs().max(1.0) {
            let j = (rounded.max(0.0) as usize).min(self.num_frames() - 1);
            out.copy_from_slice(self.frame(j));
            return Ok(());
        }
        let j = x.floor().max(0.0) as usize;
        let j = j.min(self.num_frames() - 2);
        let frac = x - j as f64;
        let a = self.frame(j);
        let b = self.frame(j + 1);
        for c in 0..self.n {
            out[c] = (1.0 - frac) * a[c] + frac * b[c];
        }
        Ok(())
    }

    /// Extracts the history segment `[t - span, t]` on the trajectory grid.
    pub fn segment_at(&self, t: f64, span: f64) -> Result<HistorySegment> {
        let nodes_f = span / self.dt;
        let nodes_r = nodes_f.round();
        if (nodes_f - nodes_r).abs() > GRID_SNAP_TOL * nodes_f.max(1.0) {
            return Err(Error::NonIntegerStepCount { span, dt: self.dt });
        }
        let back = nodes_r as usize;
        let mut values = vec![0.0; (back + 1) * self.n];
        for i in 0..=back {
            let ti = t - span + i as f64 * self.dt;
            let (head, rest) = values.split_at_mut((i + 1) * self.n);
            let _ = rest;
            self.value_at(ti, &mut head[i * self.n..])?;
        }
        HistorySegment::new(self.n, self.dt, values)
    }

    /// The final history segment `[t_end - span, t_end]`.
    pub fn final_segment(&self, span: f64) -> Result<HistorySegment> {
        self.segment_at(self.t_end(), span)
    }
}

/// Avalanche mix of a base seed and a stream index, giving decorrelated
/// per-trajectory seeds from one experiment seed.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of integration steps covering `span` with step `dt`, which must be
/// an integer within tolerance.
pub fn steps_per_span(span: f64, dt: f64) -> Result<usize> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::Config(format!("dt = {dt} must be positive")));
    }
    let k = span / dt;
    let r = k.round();
    if (k - r).abs() > GRID_SNAP_TOL * k.max(1.0) || r < 1.0 {
        return Err(Error::NonIntegerStepCount { span, dt });
    }
    Ok(r as usize)
}

/// Ring buffer of the last `N + 1` state frames.
struct Ring {
    n: usize,
    cap: usize,
    buf: Vec<f64>,
    head: usize,
}

impl Ring {
    fn new(n: usize, cap: usize) -> Self {
        Ring { n, cap, buf: vec![0.0; n * cap], head: cap - 1 }
    }

    fn slot(&self, back: usize) -> usize {
        debug_assert!(back < self.cap);
        let s = if self.head >= back { self.head - back } else { self.head + self.cap - back };
        s * self.n
    }

    fn read(&self, back: usize) -> &[f64] {
        let s = self.slot(back);
        &self.buf[s..s + self.n]
    }

    /// Reads the state `back + frac` steps behind the head by linear
    /// interpolation between adjacent frames.
    fn read_interp(&self, back: usize, frac: f64, out: &mut [f64]) {
        if frac == 0.0 {
            out.copy_from_slice(self.read(back));
        } else {
            let a = self.slot(back + 1);
            let b = self.slot(back);
            for (c, o) in out.iter_mut().enumerate().take(self.n) {
                *o = frac * self.buf[a + c] + (1.0 - frac) * self.buf[b + c];
            }
        }
    }

    fn push(&mut self, frame: &[f64]) {
        self.head += 1;
        if self.head == self.cap {
            self.head = 0;
        }
        let s = self.head * self.n;
        self.buf[s..s + self.n].copy_from_slice(frame);
    }

    /// The last `nodes` frames, oldest first, as a history segment.
    fn to_segment(&self, dt: f64) -> Result<HistorySegment> {
        let mut values = vec![0.0; self.cap * self.n];
        for i in 0..self.cap {
            let back = self.cap - 1 - i;
            values[i * self.n..(i + 1) * self.n].copy_from_slice(self.read(back));
        }
        HistorySegment::new(self.n, dt, values)
    }
}

/// A delayed read resolved against the integration grid: the value
/// `back + frac` steps behind the current time.
#[derive(Debug, Clone, Copy)]
struct LagRead {
    back: usize,
    frac: f64,
}

fn resolve_lag(lag: f64, dt: f64, max_back: usize) -> Result<LagRead> {
    let k = -lag / dt;
    let rounded = k.round();
    let (back, frac) = if (k - rounded).abs() <= GRID_SNAP_TOL * k.max(1.0) {
        (rounded as usize, 0.0)
    } else {
        (k.floor() as usize, k - k.floor())
    };
    let needed = if frac > 0.0 { back + 1 } else { back };
    if needed > max_back {
        return Err(Error::LagOutsideSpan { lag, span_min: -(max_back as f64) * dt });
    }
    Ok(LagRead { back, frac })
}

/// A polynomial functional with its lag reads resolved and scratch buffers.
struct PreparedFunctional<'a> {
    f: &'a crate::model::PolyLagFunctional,
    reads: Vec<LagRead>,
    u: Vec<f64>,
    out: Vec<f64>,
}

impl<'a> PreparedFunctional<'a> {
    fn new(
        f: &'a crate::model::PolyLagFunctional,
        dt: f64,
        max_back: usize,
    ) -> Result<Self> {
        let reads = f
            .lags()
            .iter()
            .map(|&lag| resolve_lag(lag, dt, max_back))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedFunctional {
            f,
            reads,
            u: vec![0.0; f.num_vars()],
            out: vec![0.0; f.n()],
        })
    }

    fn eval(&mut self, ring: &Ring) -> &[f64] {
        let n = self.f.n();
        for (l, read) in self.reads.iter().enumerate() {
            ring.read_interp(read.back, read.frac, &mut self.u[l * n..(l + 1) * n]);
        }
        self.f.eval_values(&self.u, &mut self.out);
        &self.out
    }
}

/// Stationary two-state Markov chain sampled at grid times, switching after
/// exact exponentially distributed holding times.
struct TwoStateChain {
    value: f64,
    next_switch: f64,
    hold: Exp<f64>,
}

impl TwoStateChain {
    fn new(g: f64, sigma0: f64, rng: &mut ChaCha8Rng) -> Self {
        // Each direction switches at rate g/2, so holding times are
        // Exp(g/2) and the autocorrelation decays at rate g.
        let hold = Exp::new(g / 2.0).expect("validated rate");
        let value = if rng.gen_bool(0.5) { sigma0 } else { -sigma0 };
        let next_switch = hold.sample(rng);
        TwoStateChain { value, next_switch, hold }
    }

    /// Value of the chain at time `t`; `t` must be non-decreasing between
    /// calls.
    fn at(&mut self, t: f64, rng: &mut ChaCha8Rng) -> f64 {
        while self.next_switch <= t {
            self.value = -self.value;
            self.next_switch += self.hold.sample(rng);
        }
        self.value
    }
}

enum Driver {
    None,
    White { sqrt_dt: f64 },
    Chain(TwoStateChain),
}

/// Core explicit Euler(–Maruyama) loop shared by all integration entry
/// points. The observer sees every computed frame: `observe(k, t_k, x)` with
/// `k = 0` the initial state at `t = 0`. Returns the abort time on
/// NaN/overflow and the final `N + 1` frames as a segment.
fn integrate_core(
    measure: &MatrixLagMeasure,
    perturbation: Option<(&Perturbation, f64)>,
    init: &HistorySegment,
    dt: f64,
    t_end: f64,
    seed: u64,
    mut observe: impl FnMut(usize, f64, &[f64]),
) -> Result<(Option<f64>, HistorySegment)> {
    let n = measure.n();
    let span = measure.span();
    if init.n() != n {
        return Err(Error::Domain(format!(
            "initial segment dimension {} does not match measure dimension {n}",
            init.n()
        )));
    }
    if init.span() + GRID_SNAP_TOL * span < span {
        return Err(Error::Domain(format!(
            "initial segment span {} is shorter than the delay span {span}",
            init.span()
        )));
    }
    if !t_end.is_finite() || t_end <= 0.0 {
        return Err(Error::Config(format!("t_end = {t_end} must be positive")));
    }
    let big_n = steps_per_span(span, dt)?;
    let steps = (t_end / dt).round() as usize;
    if steps == 0 {
        return Err(Error::Config("t_end shorter than one step".into()));
    }

    let mut ring = Ring::new(n, big_n + 1);
    {
        // Fill history frames at t = -span .. 0; the frame at t = 0 is the
        // segment's value at zero (the jump value when one is set), while
        // strictly earlier frames read the continuous part.
        let mut frame = vec![0.0; n];
        for i in 0..big_n {
            let theta = i as f64 * dt - span;
            init.eval_into(theta, &mut frame)?;
            ring.push(&frame);
        }
        ring.push(init.boundary());
    }

    let l0_reads: Vec<(LagRead, &DMatrix<f64>)> = measure
        .terms()
        .iter()
        .map(|(lag, a)| resolve_lag(*lag, dt, big_n).map(|r| (r, a)))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut f_prep, mut g_prep, mut gq_prep, eps, mut driver) = match perturbation {
        None => (None, None, None, 0.0, Driver::None),
        Some((pert, eps)) => {
            fn prep<'a>(
                f: Option<&'a crate::model::PolyLagFunctional>,
                dt: f64,
                big_n: usize,
            ) -> Result<Option<PreparedFunctional<'a>>> {
                f.map(|f| PreparedFunctional::new(f, dt, big_n)).transpose()
            }
            let driver = match pert {
                Perturbation::White { f, .. } => {
                    if f.is_some() {
                        Driver::White { sqrt_dt: dt.sqrt() }
                    } else {
                        Driver::None
                    }
                }
                Perturbation::GeneralNoise { noise, .. } => match noise {
                    NoiseModel::TwoStateMarkov { g, sigma0 } => {
                        Driver::Chain(TwoStateChain::new(*g, *sigma0, &mut rng))
                    }
                    NoiseModel::Wiener => {
                        return Err(Error::Config(
                            "general-noise integration cannot be driven by white noise".into(),
                        ))
                    }
                    NoiseModel::ExpSumCorrelation { .. } => {
                        return Err(Error::Config(
                            "a correlation-only noise description cannot be path-simulated; \
                             use a two-state chain"
                                .into(),
                        ))
                    }
                },
            };
            (
                prep(pert.f(), dt, big_n)?,
                prep(pert.g(), dt, big_n)?,
                prep(pert.g_q(), dt, big_n)?,
                eps,
                driver,
            )
        }
    };

    let mut x = vec![0.0; n];
    x.copy_from_slice(ring.read(0));
    observe(0, 0.0, &x);

    let mut drift = vec![0.0; n];
    let mut lag_val = vec![0.0; n];
    let mut flagged_at = None;

    for step in 0..steps {
        let t = step as f64 * dt;

        drift.fill(0.0);
        for (read, a) in &l0_reads {
            ring.read_interp(read.back, read.frac, &mut lag_val);
            for row in 0..n {
                let mut acc = 0.0;
                for col in 0..n {
                    acc += a[(row, col)] * lag_val[col];
                }
                drift[row] += acc;
            }
        }
        if let Some(gq) = gq_prep.as_mut() {
            let v = gq.eval(&ring);
            for c in 0..n {
                drift[c] += eps * v[c];
            }
        }
        if let Some(g) = g_prep.as_mut() {
            let v = g.eval(&ring);
            for c in 0..n {
                drift[c] += eps * eps * v[c];
            }
        }
        match &mut driver {
            Driver::None => {
                for c in 0..n {
                    x[c] += dt * drift[c];
                }
            }
            Driver::White { sqrt_dt } => {
                let noise: f64 = rng.sample(StandardNormal);
                let fv = f_prep.as_mut().expect("white driver implies F").eval(&ring);
                for c in 0..n {
                    x[c] += dt * drift[c] + eps * *sqrt_dt * noise * fv[c];
                }
            }
            Driver::Chain(chain) => {
                let sigma = chain.at(t, &mut rng);
                if let Some(fp) = f_prep.as_mut() {
                    let fv = fp.eval(&ring);
                    for c in 0..n {
                        x[c] += dt * (drift[c] + eps * sigma * fv[c]);
                    }
                } else {
                    for c in 0..n {
                        x[c] += dt * drift[c];
                    }
                }
            }
        }

        let ok = x.iter().all(|v| v.is_finite() && v.abs() < OVERFLOW_CAP);
        if !ok {
            flagged_at = Some(t + dt);
            break;
        }
        ring.push(&x);
        observe(step + 1, t + dt, &x);
    }

    let final_segment = ring.to_segment(dt)?;
    Ok((flagged_at, final_segment))
}

/// Integrates the unperturbed linear system `dx/dt = L0 x_t` from `init`
/// over `[0, t_end]` with explicit Euler steps of size `dt` (which must
/// divide the delay span). The returned trajectory starts at `t0 = -span`
/// and includes the initial history, so windows `[t - span, t]` can be
/// extracted for any grid time `t >= 0`.
pub fn integrate_unperturbed(
    measure: &MatrixLagMeasure,
    init: &HistorySegment,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    let n = measure.n();
    let span = measure.span();
    let big_n = steps_per_span(span, dt)?;
    let steps = (t_end / dt).round() as usize;
    let mut values = Vec::with_capacity((big_n + steps + 1) * n);
    {
        let mut frame = vec![0.0; n];
        for i in 0..big_n {
            init.eval_into(i as f64 * dt - span, &mut frame)?;
            values.extend_from_slice(&frame);
        }
    }
    let (flagged_at, _) = integrate_core(measure, None, init, dt, t_end, 0, |_, _, x| {
        values.extend_from_slice(x);
    })?;
    Ok(Trajectory::from_parts(
        -span,
        dt,
        n,
        values,
        0,
        NoiseKind::Unforced,
        flagged_at,
    ))
}

/// Integrates the perturbed system with stored output.
///
/// The update rule is explicit Euler–Maruyama:
///
/// ```text
/// white:   x(t+dt) = x(t) + dt [L0 + eps G_q + eps^2 G](x_t) + eps F(x_t) sqrt(dt) N
/// general: x(t+dt) = x(t) + dt [L0 + eps sigma(xi_t) F + eps G_q + eps^2 G](x_t)
/// ```
///
/// where `N` is a standard normal draw and `xi` the two-state chain sampled
/// at grid times (its switching times are exact exponential waits). Frames
/// are stored every `store_every` steps; `store_every` must divide the
/// number of steps per delay span so the stored grid contains `t = 0`.
/// On NaN/overflow the trajectory is truncated and
/// [`Trajectory::flagged_at`] records the abort time.
pub fn integrate_sdde(
    model: &PerturbedModel,
    init: &HistorySegment,
    dt: f64,
    t_end: f64,
    seed: u64,
    store_every: usize,
) -> Result<Trajectory> {
    if store_every == 0 {
        return Err(Error::Config("store_every must be at least 1".into()));
    }
    let n = model.n;
    let span = model.l0.span();
    let big_n = steps_per_span(span, dt)?;
    if big_n % store_every != 0 {
        return Err(Error::Config(format!(
            "store_every = {store_every} must divide the {big_n} steps per delay span"
        )));
    }
    let steps = (t_end / dt).round() as usize;
    let mut values = Vec::with_capacity(((big_n + steps) / store_every + 1) * n);
    {
        let mut frame = vec![0.0; n];
        let stored_hist = big_n / store_every;
        for i in 0..stored_hist {
            init.eval_into((i * store_every) as f64 * dt - span, &mut frame)?;
            values.extend_from_slice(&frame);
        }
    }
    let (flagged_at, _) = integrate_core(
        &model.l0,
        Some((&model.perturbation, model.epsilon)),
        init,
        dt,
        t_end,
        seed,
        |k, _, x| {
            if k % store_every == 0 {
                values.extend_from_slice(x);
            }
        },
    )?;
    Ok(Trajectory::from_parts(
        -span,
        dt * store_every as f64,
        n,
        values,
        seed,
        model.perturbation.noise().kind(),
        flagged_at,
    ))
}

/// Result of one ensemble member: terminal energy-like coordinate, first
/// passage time of the state norm, and whether the run aborted.
#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    /// Index within the ensemble.
    pub index: usize,
    /// Per-trajectory seed (mixed from the base seed and the index).
    pub seed: u64,
    /// Energy-like coordinate of the final history segment; `None` when the
    /// trajectory aborted before reaching `t_end`.
    pub h_final: Option<f64>,
    /// First grid time with `|x(t)| >= amp_threshold` (Euclidean norm),
    /// when a threshold was requested and reached.
    pub first_passage: Option<f64>,
    /// Abort time on NaN/overflow.
    pub flagged_at: Option<f64>,
}

/// Integrates `count` independent realizations in parallel, recording for
/// each one the terminal energy-like coordinate and (optionally) the first
/// time the state norm reaches `amp_threshold`. Trajectories are not stored;
/// memory stays at one delay span per worker.
#[allow(clippy::too_many_arguments)]
pub fn sdde_ensemble(
    model: &PerturbedModel,
    spec: &SpectralData,
    init: &HistorySegment,
    dt: f64,
    t_end: f64,
    amp_threshold: Option<f64>,
    count: usize,
    base_seed: u64,
) -> Result<Vec<EnsembleOutcome>> {
    (0..count)
        .into_par_iter()
        .map(|index| {
            let seed = mix_seed(base_seed, index as u64);
            let mut first_passage = None;
            let (flagged_at, final_seg) = integrate_core(
                &model.l0,
                Some((&model.perturbation, model.epsilon)),
                init,
                dt,
                t_end,
                seed,
                |_, t, x| {
                    if first_passage.is_none() {
                        if let Some(thr) = amp_threshold {
                            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                            if norm >= thr {
                                first_passage = Some(t);
                            }
                        }
                    }
                },
            )?;
            let h_final = if flagged_at.is_none() {
                Some(h_of_segment(spec, &model.l0, &final_seg)?)
            } else {
                None
            };
            Ok(EnsembleOutcome { index, seed, h_final, first_passage, flagged_at })
        })
        .collect()
}

/// Energy-like coordinate of a history segment: twice the squared modulus of
/// its critical-pair coordinate, `2 |<psi_1, seg>|^2`.
pub fn h_of_segment(
    spec: &SpectralData,
    measure: &MatrixLagMeasure,
    seg: &HistorySegment,
) -> Result<f64> {
    let z = crate::spectrum::critical_coordinate(spec, measure, seg)?;
    Ok(2.0 * z.norm_sqr())
}

/// Finite-time Lyapunov-exponent estimator
/// `lambda(t) = log( sup_{s in [t - window, t]} |x_c(s)| ) / t`
/// evaluated at the requested times, using the trajectory's stored frames.
///
/// The window should cover at least one oscillation period (callers that
/// know the critical frequency should check `window > 2 pi / omega_c`), and
/// every requested time must satisfy `t >= window` and lie within the
/// trajectory.
pub fn lyapunov_estimator(
    traj: &Trajectory,
    window: f64,
    component: usize,
    times: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if component >= traj.n() {
        return Err(Error::Domain(format!(
            "component {component} out of range for dimension {}",
            traj.n()
        )));
    }
    if !window.is_finite() || window <= 0.0 {
        return Err(Error::Domain(format!("window {window} must be positive")));
    }
    if window > traj.t_end() {
        return Err(Error::Domain(format!(
            "window {window} is longer than the trajectory (ends at {})",
            traj.t_end()
        )));
    }
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if t < window * (1.0 - GRID_SNAP_TOL) {
            return Err(Error::Domain(format!(
                "estimator time {t} must be at least the window {window}"
            )));
        }
        if t > traj.t_end() * (1.0 + GRID_SNAP_TOL) {
            return Err(Error::Domain(format!(
                "estimator time {t} beyond trajectory end {}",
                traj.t_end()
            )));
        }
        let j_lo = ((t - window - traj.t0) / traj.dt).ceil().max(0.0) as usize;
        let j_hi = (((t - traj.t0) / traj.dt).floor() as usize).min(traj.num_frames() - 1);
        let mut sup = 0.0f64;
        for j in j_lo..=j_hi {
            sup = sup.max(traj.component(j, component).abs());
        }
        if sup == 0.0 {
            return Err(Error::Domain(
                "trajectory is identically zero on the estimator window".into(),
            ));
        }
        out.push((t, sup.ln() / t));
    }
    Ok(out)
}
