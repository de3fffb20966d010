use nalgebra::DVector;
use serde::Serialize;

use crate::amed::step::apply;
use crate::amed::{AmedKind, PredictorOutput};
use crate::error::{Error, Result};
use crate::schedule::TimeSchedule;
use crate::score::ScoreModel;
use crate::solvers::{advance, Carry, Solver};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignRow {
    pub step: usize,
    pub t_hi: f64,
    pub t_lo: f64,
    pub best_r: f64,
    /// Distance of the r=0.5 baseline to the oracle at `t_lo`.
    pub baseline_error: f64,
    pub searched_error: f64,
    /// `baseline_error - searched_error`.
    pub alignment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentTable {
    pub rows: Vec<AlignRow>,
}

impl AlignmentTable {
    pub fn mean_alignment(&self) -> f64 {
        self.rows.iter().map(|r| r.alignment).sum::<f64>() / self.rows.len() as f64
    }
}

/// One step with split ratio `r`. For dpm2 the ratio replaces its own; any
/// other base is split at `s` like a neutral plugin.
fn split_step<M: ScoreModel + ?Sized>(
    model: &M,
    base: Solver,
    carry: &mut Carry,
    x: &DVector<f64>,
    t_hi: f64,
    t_lo: f64,
    r: f64,
) -> Result<DVector<f64>> {
    let first = model.eval(x, t_hi)?;
    let mut sink = Vec::new();
    match base {
        Solver::Dpm2 { .. } => advance(
            model,
            Solver::Dpm2 { r },
            carry,
            x,
            t_hi,
            t_lo,
            &first,
            1.0,
            &mut sink,
        ),
        _ => apply(
            model,
            AmedKind::Plugin { base },
            carry,
            x,
            t_hi,
            t_lo,
            &first,
            PredictorOutput { r, c: 1.0, a: None },
            &mut sink,
        ),
    }
}

/// Greedy per-step search of the split ratio against an oracle trajectory on
/// the same nodes. The searched trajectory continues from its own best state.
pub fn grid_align<M: ScoreModel + ?Sized>(
    model: &M,
    base: Solver,
    schedule: &TimeSchedule,
    grid: &[f64],
    oracle: &Trajectory,
) -> Result<AlignmentTable> {
    base.validate()?;
    if grid.is_empty() || grid.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::Parameter(format!(
            "grid values must lie in (0, 1], got {grid:?}"
        )));
    }
    let times = schedule.descending();
    if oracle.nodes.len() != times.len()
        || oracle.nodes.iter().zip(&times).any(|((t, _), s)| t != s)
    {
        return Err(Error::Contract(
            "oracle nodes do not match the schedule".into(),
        ));
    }
    let mut x_b = oracle.nodes[0].1.clone();
    let mut x_s = x_b.clone();
    let (mut carry_b, mut carry_s) = (Carry::default(), Carry::default());
    let mut rows = Vec::with_capacity(times.len() - 1);
    for (step, (t_hi, t_lo)) in schedule.intervals_desc().enumerate() {
        let target = &oracle.nodes[step + 1].1;
        let wrap = |e: Error| e.at_step(step, t_lo, t_hi);
        x_b = split_step(model, base, &mut carry_b, &x_b, t_hi, t_lo, 0.5).map_err(wrap)?;
        let baseline_error = (&x_b - target).norm();

        let mut best: Option<(f64, f64, DVector<f64>, Carry)> = None;
        for &r in grid {
            let mut carry = carry_s.clone();
            let x = split_step(model, base, &mut carry, &x_s, t_hi, t_lo, r).map_err(wrap)?;
            let err = (&x - target).norm();
            if best.as_ref().is_none_or(|b| err < b.1) {
                best = Some((r, err, x, carry));
            }
        }
        let (best_r, searched_error, x, carry) = best.expect("grid is non-empty");
        x_s = x;
        carry_s = carry;
        rows.push(AlignRow {
            step,
            t_hi,
            t_lo,
            best_r,
            baseline_error,
            searched_error,
            alignment: baseline_error - searched_error,
        });
    }
    Ok(AlignmentTable { rows })
}

/// `lo:hi:step` inclusive, e.g. `0.1:1.0:0.1`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Parameter(format!("bad grid {spec:?}: {e}")))?;
    let [lo, hi, step] = parts[..] else {
        return Err(Error::Parameter(format!(
            "grid must be lo:hi:step, got {spec:?}"
        )));
    };
    if !(step > 0.0 && hi >= lo) {
        return Err(Error::Parameter(format!("bad grid {spec:?}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| lo + i as f64 * step).collect())
}
