use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::predictor::{PredictorOutput, PredictorParams};
use crate::error::{Error, Result};
use crate::schedule::{geometric_unchecked, TimeSchedule};
use crate::score::{ModelEval, ScoreModel};
use crate::solvers::{
    advance, afs_eval, axpy, check_interval, eval_recorded, Carry, Solver, StepOutput,
};
use crate::trajectory::{Eval, StepPlan, Trajectory};

/// Which learned step to run: the stand-alone mean-direction solver, or a
/// base solver wrapped as a plugin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AmedKind {
    MeanDirection,
    Plugin { base: Solver },
}

impl AmedKind {
    pub fn from_base(base: Option<Solver>) -> Self {
        match base {
            None => AmedKind::MeanDirection,
            Some(base) => AmedKind::Plugin { base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AmedKind::MeanDirection => Ok(()),
            AmedKind::Plugin { base } => base.validate(),
        }
    }

    pub fn evals_per_step(&self) -> usize {
        match self {
            AmedKind::MeanDirection => 2,
            AmedKind::Plugin { base } => 2 * base.evals_per_step(),
        }
    }

    /// Evaluations for a run over `n_nodes` schedule nodes.
    pub fn nfe(&self, n_nodes: usize, afs: bool) -> usize {
        (n_nodes - 1) * self.evals_per_step() - usize::from(afs && n_nodes > 1)
    }
}

impl std::fmt::Display for AmedKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AmedKind::MeanDirection => write!(f, "amed"),
            AmedKind::Plugin { base } => write!(f, "amed-plugin({base})"),
        }
    }
}

/// Advance one interval with fixed coefficients, given the evaluation at the
/// start of the interval. `carry` is only touched by multistep plugin bases.
#[allow(clippy::too_many_arguments)]
pub(crate) fn apply<M: ScoreModel + ?Sized>(
    model: &M,
    kind: AmedKind,
    carry: &mut Carry,
    x: &DVector<f64>,
    t_hi: f64,
    t_lo: f64,
    first: &ModelEval,
    coeffs: PredictorOutput,
    evals: &mut Vec<Eval>,
) -> Result<DVector<f64>> {
    let s = geometric_unchecked(t_lo, t_hi, coeffs.r);
    let t_eval = coeffs.time_scale() * s;
    let x_next = match kind {
        AmedKind::MeanDirection => {
            let x_s = axpy(x, s - t_hi, &first.epsilon);
            let mid = eval_recorded(model, &x_s, t_eval, evals)?;
            axpy(x, coeffs.c * (t_lo - t_hi), &mid.epsilon)
        }
        AmedKind::Plugin { base } => {
            let x_s = advance(model, base, carry, x, t_hi, s, first, 1.0, evals)?;
            let mid = eval_recorded(model, &x_s, t_eval, evals)?;
            advance(model, base, carry, &x_s, s, t_lo, &mid, coeffs.c, evals)?
        }
    };
    if x_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite state".into()));
    }
    Ok(x_next)
}

fn checked_step<M: ScoreModel + ?Sized>(
    model: &M,
    params: &PredictorParams,
    kind: AmedKind,
    carry: &mut Carry,
    x: &DVector<f64>,
    t_hi: f64,
    t_lo: f64,
) -> Result<StepOutput> {
    check_interval(t_hi, t_lo)?;
    kind.validate()?;
    let mut evals = Vec::new();
    let first = eval_recorded(model, x, t_hi, &mut evals)?;
    let coeffs = params.forward(&first.feature, t_hi, t_lo)?.output;
    let x_next = apply(
        model, kind, carry, x, t_hi, t_lo, &first, coeffs, &mut evals,
    )?;
    Ok(StepOutput { x_next, evals })
}

/// One learned mean-direction step: `x + c (t_lo - t_hi) eps(x_s, a s)`.
pub fn amed_step<M: ScoreModel + ?Sized>(
    model: &M,
    params: &PredictorParams,
    x: &DVector<f64>,
    t_hi: f64,
    t_lo: f64,
) -> Result<StepOutput> {
    checked_step(
        model,
        params,
        AmedKind::MeanDirection,
        &mut Carry::default(),
        x,
        t_hi,
        t_lo,
    )
}

/// One plugin step: base substep to `s`, then a base substep to `t_lo` whose
/// direction is scaled by `c`.
pub fn amed_plugin_step<M: ScoreModel + ?Sized>(
    model: &M,
    params: &PredictorParams,
    base: Solver,
    x: &DVector<f64>,
    t_hi: f64,
    t_lo: f64,
    carry: &mut Carry,
) -> Result<StepOutput> {
    checked_step(
        model,
        params,
        AmedKind::Plugin { base },
        carry,
        x,
        t_hi,
        t_lo,
    )
}

/// Full learned sampling run from `x_t_max`. With `afs`, the first step uses
/// `x / t` instead of a model evaluation and the predictor sees a zero feature.
pub fn amed_sample<M: ScoreModel + ?Sized>(
    model: &M,
    params: &PredictorParams,
    kind: AmedKind,
    schedule: &TimeSchedule,
    x_t_max: &DVector<f64>,
    afs: bool,
) -> Result<Trajectory> {
    kind.validate()?;
    if x_t_max.len() != model.dim() {
        return Err(Error::Parameter(format!(
            "initial state has length {}, model dimension is {}",
            x_t_max.len(),
            model.dim()
        )));
    }
    let mut carry = Carry::default();
    let mut x = x_t_max.clone();
    let mut nodes = vec![(schedule.t_max(), x.clone())];
    let mut evals = Vec::new();
    let mut plans = Vec::new();
    for (i, (t_hi, t_lo)) in schedule.intervals_desc().enumerate() {
        let mut step = || -> Result<(DVector<f64>, StepPlan)> {
            let first = if i == 0 && afs {
                afs_eval(&x, t_hi)
            } else {
                eval_recorded(model, &x, t_hi, &mut evals)?
            };
            let coeffs = params.forward(&first.feature, t_hi, t_lo)?.output;
            let s = geometric_unchecked(t_lo, t_hi, coeffs.r);
            let x_next = apply(
                model, kind, &mut carry, &x, t_hi, t_lo, &first, coeffs, &mut evals,
            )?;
            Ok((x_next, StepPlan::single(s, coeffs.c, coeffs.time_scale())))
        };
        let (x_next, plan) = step().map_err(|e| e.at_step(i, t_lo, t_hi))?;
        x = x_next;
        nodes.push((t_lo, x.clone()));
        plans.push(plan);
    }
    Ok(Trajectory {
        nodes,
        nfe: evals.len(),
        evals,
        plans,
    })
}
