//! Sampling time grids.
//!
//! Times are stored ascending (`t_1 = t_min` first); samplers walk them from the
//! end. Refinement for teacher trajectories inserts nodes with the same rule
//! that built the grid, so a refined polynomial grid coincides with a denser
//! polynomial grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    Polynomial {
        rho: f64,
    },
    #[serde(rename = "logsnr")]
    LogSnr,
    Uniform,
}

impl ScheduleKind {
    fn validate(&self) -> Result<()> {
        match *self {
            ScheduleKind::Polynomial { rho } if !(rho > 0.0 && rho.is_finite()) => Err(
                Error::Parameter(format!("polynomial rho must be positive, got {rho}")),
            ),
            _ => Ok(()),
        }
    }

    /// Point at fraction `frac` in [0, 1] between `lo` and `hi` under this kind's spacing rule.
    fn interpolate(&self, lo: f64, hi: f64, frac: f64) -> f64 {
        match *self {
            ScheduleKind::Polynomial { rho } => {
                let (a, b) = (lo.powf(1.0 / rho), hi.powf(1.0 / rho));
                (a + frac * (b - a)).powf(rho)
            }
            ScheduleKind::LogSnr => {
                let (a, b) = (lo.ln(), hi.ln());
                (a + frac * (b - a)).exp()
            }
            ScheduleKind::Uniform => lo + frac * (hi - lo),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Polynomial { rho } => write!(f, "polynomial({rho})"),
            ScheduleKind::LogSnr => write!(f, "logsnr"),
            ScheduleKind::Uniform => write!(f, "uniform"),
        }
    }
}

/// Strictly increasing time grid with at least two nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSchedule {
    times: Vec<f64>,
    kind: ScheduleKind,
}

impl TimeSchedule {
    /// Wrap explicit times. They must be strictly increasing, positive and at least two.
    pub fn from_times(times: Vec<f64>, kind: ScheduleKind) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Schedule(format!(
                "need at least 2 nodes, got {}",
                times.len()
            )));
        }
        if times[0] <= 0.0 || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Schedule("times must be finite and positive".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Schedule("times must be strictly increasing".into()));
        }
        Ok(Self { times, kind })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_min(&self) -> f64 {
        self.times[0]
    }

    pub fn t_max(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Intervals `(t_hi, t_lo)` in sampling order, from `t_N` down to `t_1`.
    pub fn intervals_desc(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).rev().map(|w| (w[1], w[0]))
    }

    /// Times in sampling order (descending).
    pub fn descending(&self) -> Vec<f64> {
        self.times.iter().rev().copied().collect()
    }
}

/// Build an `n`-node grid on `[t_min, t_max]`.
pub fn make_schedule(kind: ScheduleKind, n: usize, t_min: f64, t_max: f64) -> Result<TimeSchedule> {
    kind.validate()?;
    if n < 2 {
        return Err(Error::Parameter(format!("schedule needs N >= 2, got {n}")));
    }
    if !(t_min > 0.0 && t_max > t_min && t_max.is_finite()) {
        return Err(Error::Parameter(format!(
            "need 0 < t_min < t_max, got [{t_min}, {t_max}]"
        )));
    }
    let last = (n - 1) as f64;
    let times = (0..n)
        .map(|i| match i {
            0 => t_min,
            i if i == n - 1 => t_max,
            i => kind.interpolate(t_min, t_max, i as f64 / last),
        })
        .collect();
    TimeSchedule::from_times(times, kind)
}

/// Insert `m` intermediate nodes into every interval, following the schedule's own spacing rule.
///
/// Original nodes are copied, not recomputed, so they survive bit for bit.
pub fn refine_teacher(schedule: &TimeSchedule, m: usize) -> Result<TimeSchedule> {
    if m == 0 {
        return Ok(schedule.clone());
    }
    let kind = schedule.kind();
    let times = schedule.times();
    let mut out = Vec::with_capacity((m + 1) * (times.len() - 1) + 1);
    for w in times.windows(2) {
        out.push(w[0]);
        for i in 1..=m {
            out.push(kind.interpolate(w[0], w[1], i as f64 / (m + 1) as f64));
        }
    }
    out.push(schedule.t_max());
    TimeSchedule::from_times(out, kind)
}

/// Geometric interpolation `t_lo^r * t_hi^(1-r)`; `r = 1` collapses onto `t_lo`.
pub fn geometric_intermediate(t_lo: f64, t_hi: f64, r: f64) -> Result<f64> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Parameter(format!("r must lie in (0, 1], got {r}")));
    }
    if !(t_lo > 0.0 && t_hi > t_lo) {
        return Err(Error::Domain(format!(
            "need 0 < t_lo < t_hi, got t_lo={t_lo}, t_hi={t_hi}"
        )));
    }
    Ok(geometric_unchecked(t_lo, t_hi, r))
}

#[inline]
pub(crate) fn geometric_unchecked(t_lo: f64, t_hi: f64, r: f64) -> f64 {
    t_lo.powf(r) * t_hi.powf(1.0 - r)
}
