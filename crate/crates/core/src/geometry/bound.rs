use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amed::{amed_sample, AmedKind, PredictorParams};
use crate::error::{Error, Result};
use crate::rng::{gaussian_vector, tags, SeedTree};
use crate::schedule::{ScheduleKind, TimeSchedule};
use crate::score::{rk4_on_grid, ScoreModel};

/// Constants of the scaled logistic bound `f(tau) = a (sigmoid(b tau) - 1/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub a: f64,
    pub b: f64,
    pub d: usize,
}

impl BoundParams {
    pub fn new(a: f64, b: f64, d: usize) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) || d == 0 {
            return Err(Error::Parameter(format!(
                "need a, b > 0 and d >= 1, got a={a}, b={b}, d={d}"
            )));
        }
        Ok(Self { a, b, d })
    }

    /// `a = sqrt(3d) / 15`, `b = 3`.
    pub fn standard(d: usize) -> Result<Self> {
        Self::new((3.0 * d as f64).sqrt() / 15.0, 3.0, d)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logistic_bound(p: &BoundParams, tau: f64) -> f64 {
    p.a * (sigmoid(p.b * tau) - 0.5)
}

/// `integral_s^t f^2`, written with `1/(1+e^x)` so large arguments lose nothing.
fn f_squared_integral(p: &BoundParams, s: f64, t: f64) -> f64 {
    let e = |x: f64| 1.0 / (1.0 + x.exp());
    let inner = e(p.b * t) - e(p.b * s) + 0.25 * p.b * (t - s);
    p.a * p.a / p.b * inner.max(0.0)
}

/// Concentration radius of the zero-drift SDE `dz = f/sqrt(d) dw` run over `[s, t]`.
pub fn shell_radius(p: &BoundParams, s: f64, t: f64) -> Result<f64> {
    if !(s > 0.0 && s < t) {
        return Err(Error::Domain(format!("need 0 < s < t, got s={s}, t={t}")));
    }
    Ok(f_squared_integral(p, s, t).sqrt())
}

/// Per-coordinate variance `r^2 / d`.
pub fn shell_variance(p: &BoundParams, s: f64, t: f64) -> Result<f64> {
    Ok(shell_radius(p, s, t)?.powi(2) / p.d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShellReport {
    pub mean_norm: f64,
    pub rel_std: f64,
    pub radius: f64,
    pub trials: usize,
    pub substeps: usize,
}

/// Euler-Maruyama simulation of `dz = g(tau) dw`, `g = f / sqrt(d)`, from `t`
/// down to `s` starting at zero. Each path has its own seed stream.
pub fn mc_shell_check(
    p: &BoundParams,
    s: f64,
    t: f64,
    trials: usize,
    substeps: usize,
    seed: u64,
) -> Result<ShellReport> {
    let radius = shell_radius(p, s, t)?;
    if substeps < 200 {
        return Err(Error::Parameter(format!(
            "need at least 200 substeps, got {substeps}"
        )));
    }
    if trials < 2 {
        return Err(Error::Parameter("need at least 2 trials".into()));
    }
    let dt = (t - s) / substeps as f64;
    let gains: Vec<f64> = (0..substeps)
        .map(|k| logistic_bound(p, t - k as f64 * dt) / (p.d as f64).sqrt() * dt.sqrt())
        .collect();
    let paths = SeedTree::new(seed).child(tags::PATHS);
    let norms: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = paths.child(i as u64).rng();
            let mut z = DVector::zeros(p.d);
            for g in &gains {
                z += gaussian_vector(&mut rng, p.d, *g);
            }
            z.norm()
        })
        .collect();
    let n = trials as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(ShellReport {
        mean_norm: mean,
        rel_std: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
        radius,
        trials,
        substeps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundSample {
    pub trajectory: usize,
    pub step: usize,
    pub t: f64,
    pub s: f64,
    /// `|x_s - x_s^A|`: exact flow from the reference state at `t` vs one Euler step.
    pub actual: f64,
    /// `f(s) + f(t) + r(s, t)`.
    pub bound: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub samples: Vec<BoundSample>,
    pub violation_rate: f64,
}

/// Compare the Euler prediction of the intermediate state with the exact flow
/// on every learned step, against the logistic-plus-shell bound.
///
/// `references` are oracle trajectories on `schedule` for the same priors; the
/// intermediate times come from running the predictor on each prior.
#[allow(clippy::too_many_arguments)]
pub fn bound_report<M: ScoreModel + ?Sized>(
    model: &M,
    schedule: &TimeSchedule,
    params: &PredictorParams,
    kind: AmedKind,
    bound: &BoundParams,
    references: &[crate::trajectory::Trajectory],
    substeps: usize,
) -> Result<BoundReport> {
    if references.is_empty() {
        return Err(Error::Contract(
            "bound report needs at least one reference trajectory".into(),
        ));
    }
    if references.iter().any(|r| r.nodes.len() != schedule.len()) {
        return Err(Error::Contract(
            "reference trajectories do not match the schedule".into(),
        ));
    }
    let per_traj = references
        .par_iter()
        .enumerate()
        .map(|(i, reference)| {
            let prior = &reference.nodes[0].1;
            let learned = amed_sample(model, params, kind, schedule, prior, false)?;
            learned
                .plans
                .iter()
                .enumerate()
                .map(|(step, plan)| {
                    let (t, x_t) = &reference.nodes[step];
                    let s = plan.intermediates[0];
                    let eps = model.eval(x_t, *t)?.epsilon;
                    let euler = x_t + eps * (s - t);
                    let piece = TimeSchedule::from_times(vec![s, *t], ScheduleKind::Uniform)?;
                    let exact = rk4_on_grid(model, x_t, &piece, substeps)?
                        .endpoint()
                        .clone();
                    let actual = (exact - euler).norm();
                    let b = logistic_bound(bound, s)
                        + logistic_bound(bound, *t)
                        + shell_radius(bound, s, *t)?;
                    Ok(BoundSample {
                        trajectory: i,
                        step,
                        t: *t,
                        s,
                        actual,
                        bound: b,
                        ratio: actual / b,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<BoundSample> = per_traj.into_iter().flatten().collect();
    let violations = samples.iter().filter(|s| s.actual > s.bound).count();
    Ok(BoundReport {
        violation_rate: violations as f64 / samples.len() as f64,
        samples,
    })
}

/// Least-squares fit of `(a, b)` to `(tau, deviation)` pairs: `b` from a
/// log-spaced scan, `a` in closed form for each `b`.
pub fn fit_logistic(points: &[(f64, f64)], d: usize) -> Result<BoundParams> {
    if points.len() < 2 {
        return Err(Error::Parameter("need at least 2 points to fit".into()));
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for i in 0..=400 {
        let b = 10f64.powf(-3.0 + 6.0 * i as f64 / 400.0);
        let phi: Vec<f64> = points
            .iter()
            .map(|(tau, _)| sigmoid(b * tau) - 0.5)
            .collect();
        let pp: f64 = phi.iter().map(|v| v * v).sum();
        if pp <= 0.0 {
            continue;
        }
        let a = phi.iter().zip(points).map(|(f, (_, y))| f * y).sum::<f64>() / pp;
        let sse: f64 = phi
            .iter()
            .zip(points)
            .map(|(f, (_, y))| (a * f - y).powi(2))
            .sum();
        if a > 0.0 && best.is_none_or(|(_, _, e)| sse < e) {
            best = Some((a, b, sse));
        }
    }
    let (a, b, _) = best.ok_or_else(|| Error::Numeric("no positive logistic fit".into()))?;
    BoundParams::new(a, b, d)
}
