//! Distribution-level comparison of simulation ensembles: empirical CDFs
//! with censoring, Kolmogorov–Smirnov distances, and quantile summaries.
//!
//! Censored observations (e.g. first-passage times that never passed) are
//! carried as mass at `+infinity`: they count towards the sample size and
//! are reported separately, but contribute no jump, so the empirical CDF
//! saturates at `(size - censored) / size`. Dropping them silently would
//! bias every passage-time comparison towards the fast passages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An empirical distribution function: a right-continuous step function
/// with jumps of `1/size` at each observed value, saturating at
/// `(size - censored) / size`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    /// Observed (finite) values, sorted ascending, duplicates kept.
    values: Vec<f64>,
    /// Number of censored observations (mass at `+infinity`).
    censored: usize,
}

impl EmpiricalCdf {
    /// Builds the empirical CDF of fully observed samples.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        Self::from_censored(samples.iter().map(|&x| Some(x)))
    }

    /// Builds the empirical CDF of a partially censored sample; `None`
    /// entries are censored observations.
    pub fn from_censored(samples: impl IntoIterator<Item = Option<f64>>) -> Result<Self> {
        let mut values = Vec::new();
        let mut censored = 0usize;
        for s in samples {
            match s {
                Some(x) if x.is_finite() => values.push(x),
                Some(x) => {
                    return Err(Error::Domain(format!(
                        "sample value {x} must be finite (censor with None instead)"
                    )));
                }
                None => censored += 1,
            }
        }
        if values.is_empty() && censored == 0 {
            return Err(Error::Config("empirical distribution needs at least one sample".into()));
        }
        values.sort_unstable_by(|a, b| a.total_cmp(b));
        Ok(EmpiricalCdf { values, censored })
    }

    /// Total sample size including censored observations.
    pub fn size(&self) -> usize {
        self.values.len() + self.censored
    }

    /// Number of observed (finite) values.
    pub fn observed(&self) -> usize {
        self.values.len()
    }

    /// Number of censored observations.
    pub fn censored(&self) -> usize {
        self.censored
    }

    /// Whether every observation was censored (the CDF is identically
    /// zero and carries no distributional information).
    pub fn is_degenerate(&self) -> bool {
        self.values.is_empty()
    }

    /// The total mass at finite values, `(size - censored) / size`; the
    /// CDF saturates at this level.
    pub fn total_mass(&self) -> f64 {
        self.values.len() as f64 / self.size() as f64
    }

    /// The sorted observed values (the CDF's jump points, duplicates kept).
    pub fn jump_points(&self) -> &[f64] {
        &self.values
    }

    /// CDF value at `x` (right-continuous: counts values `<= x`).
    pub fn eval(&self, x: f64) -> f64 {
        self.values.partition_point(|v| *v <= x) as f64 / self.size() as f64
    }

    /// Left limit of the CDF at `x` (counts values `< x`).
    pub fn eval_before(&self, x: f64) -> f64 {
        self.values.partition_point(|v| *v < x) as f64 / self.size() as f64
    }
}

/// Kolmogorov–Smirnov distance between two empirical CDFs: the sup-norm
/// of their difference, evaluated from both sides at every jump point of
/// either input. Differences in censored mass surface at the top of the
/// ladder (beyond all jumps both functions are constant at their total
/// mass), so censored-heavy samples are never silently equal to observed
/// ones.
pub fn ks_distance(a: &EmpiricalCdf, b: &EmpiricalCdf) -> f64 {
    let mut sup = (a.total_mass() - b.total_mass()).abs();
    for x in a.jump_points().iter().chain(b.jump_points()) {
        sup = sup
            .max((a.eval(*x) - b.eval(*x)).abs())
            .max((a.eval_before(*x) - b.eval_before(*x)).abs());
    }
    sup
}

/// Kolmogorov–Smirnov distance between an empirical CDF and an analytic
/// CDF `F`. Evaluates both one-sided limits of the empirical function at
/// each jump; censored mass appears as the gap `1 - total_mass` left at
/// the top (assuming `F` is a proper CDF with total mass one).
pub fn ks_distance_to_cdf(a: &EmpiricalCdf, cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sup = 1.0 - a.total_mass();
    for x in a.jump_points() {
        let f = cdf(*x);
        sup = sup.max((f - a.eval(*x)).abs()).max((f - a.eval_before(*x)).abs());
    }
    sup
}

/// Machine-readable summary of a two-sample comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsSummary {
    /// Kolmogorov–Smirnov distance.
    pub ks: f64,
    /// Total size of the first sample.
    pub n_a: usize,
    /// Total size of the second sample.
    pub n_b: usize,
    /// Censored count in the first sample.
    pub censored_a: usize,
    /// Censored count in the second sample.
    pub censored_b: usize,
}

/// Compares two empirical CDFs and packages the distance with the sample
/// bookkeeping.
pub fn ks_summary(a: &EmpiricalCdf, b: &EmpiricalCdf) -> KsSummary {
    KsSummary {
        ks: ks_distance(a, b),
        n_a: a.size(),
        n_b: b.size(),
        censored_a: a.censored(),
        censored_b: b.censored(),
    }
}

/// Quantile of an ascending-sorted slice by linear interpolation of order
/// statistics: the quantile at probability `p` sits at fractional position
/// `(len - 1) * p` between neighbouring order statistics. For `p = 0.5`
/// and an even length this is the midpoint of the two middle values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Config("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} must lie in [0, 1]")));
    }
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 || lo + 1 == sorted.len() {
        Ok(sorted[lo])
    } else {
        Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
    }
}

/// One time point of an ensemble summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotPoint {
    /// The time the summary refers to.
    pub t: f64,
    /// Ensemble mean.
    pub mean: f64,
    /// 25th percentile (linear interpolation of order statistics).
    pub q25: f64,
    /// 75th percentile.
    pub q75: f64,
}

/// Summarizes an ensemble of aligned time series by per-time mean and
/// quartiles. Each series must carry one value per entry of `times`, and
/// at least four series are required for the quartiles to be meaningful.
pub fn boxplot_series(series: &[Vec<f64>], times: &[f64]) -> Result<Vec<BoxplotPoint>> {
    if series.len() < 4 {
        return Err(Error::Config(format!(
            "ensemble summary needs at least 4 series, got {}",
            series.len()
        )));
    }
    for (i, s) in series.iter().enumerate() {
        if s.len() != times.len() {
            return Err(Error::Config(format!(
                "series {i} has {} values for {} times",
                s.len(),
                times.len()
            )));
        }
        if let Some(bad) = s.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("series {i} contains non-finite value {bad}")));
        }
    }
    let mut out = Vec::with_capacity(times.len());
    let mut column = vec![0.0; series.len()];
    for (j, &t) in times.iter().enumerate() {
        for (i, s) in series.iter().enumerate() {
            column[i] = s[j];
        }
        let mean = column.iter().sum::<f64>() / column.len() as f64;
        column.sort_unstable_by(|a, b| a.total_cmp(b));
        out.push(BoxplotPoint {
            t,
            mean,
            q25: quantile_sorted(&column, 0.25)?,
            q75: quantile_sorted(&column, 0.75)?,
        });
    }
    Ok(out)
}
