//! Baseline probability-flow ODE solvers under one stepping interface.
//!
//! All solvers integrate `dx/dt = eps(x, t)` from a larger time `t_hi` down to
//! `t_lo`. Each step receives the evaluation at `(x, t_hi)` from its caller so
//! that the analytical first step and the learned plugin can substitute or
//! reuse it without extra model calls.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{geometric_intermediate, geometric_unchecked, TimeSchedule};
use crate::score::{ModelEval, ScoreModel};
use crate::trajectory::{Eval, Trajectory};

/// Classical Adams-Bashforth weights for a uniform grid, newest slope first.
const AB_COEFFS: [&[f64]; 4] = [
    &[1.0],
    &[3.0 / 2.0, -1.0 / 2.0],
    &[23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0],
    &[55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0],
];

/// Variable-step Adams-Bashforth weights relative to the step length.
///
/// `nodes[0]` is the current time, the rest are past evaluation times (newest
/// first). Weight `j` is the integral of the j-th Lagrange basis polynomial over
/// `[nodes[0], t_next]`, divided by `t_next - nodes[0]`. On a uniform grid these
/// are the classical coefficients; a single node gives exactly `[1.0]`.
pub fn adams_bashforth_weights(nodes: &[f64], t_next: f64) -> Vec<f64> {
    if nodes.len() == 1 {
        return vec![1.0];
    }
    // 3-point Gauss-Legendre is exact for the cubic basis of a 4-node rule.
    let sqrt_06 = 0.6f64.sqrt();
    let gauss = [
        (-sqrt_06, 5.0 / 9.0),
        (0.0, 8.0 / 9.0),
        (sqrt_06, 5.0 / 9.0),
    ];
    let (t0, h) = (nodes[0], t_next - nodes[0]);
    (0..nodes.len())
        .map(|j| {
            gauss
                .iter()
                .map(|(xi, w)| {
                    let tau = t0 + 0.5 * h * (1.0 + xi);
                    let basis: f64 = nodes
                        .iter()
                        .enumerate()
                        .filter(|(m, _)| *m != j)
                        .map(|(_, tm)| (tau - tm) / (nodes[j] - tm))
                        .product();
                    0.5 * w * basis
                })
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "solver", rename_all = "snake_case")]
pub enum Solver {
    /// Explicit Euler on the noise prediction (DDIM).
    EulerDdim,
    /// Heun's second-order method (EDM).
    HeunEdm,
    /// Generalised DPM-Solver-2 with intermediate `t_lo^r t_hi^(1-r)`.
    Dpm2 { r: f64 },
    /// Improved PNDM: Adams-Bashforth on eps with lower-order warm start,
    /// coefficients adapted to the actual (non-uniform) step sizes.
    Ipndm { order: usize },
    /// iPNDM with the classical uniform-grid coefficients applied as-is.
    IpndmFixed { order: usize },
    /// Multistep DPM-Solver++(2M) on the data prediction.
    DpmPp2m,
}

impl Solver {
    pub const DPM2_DEFAULT: Solver = Solver::Dpm2 { r: 0.5 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            Solver::Dpm2 { r } if !(r > 0.0 && r <= 1.0) => Err(Error::Parameter(format!(
                "dpm2 r must lie in (0, 1], got {r}"
            ))),
            Solver::Ipndm { order } | Solver::IpndmFixed { order } if !(1..=4).contains(&order) => {
                Err(Error::Parameter(format!(
                    "ipndm order must be 1..=4, got {order}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Model evaluations consumed by one step.
    pub fn evals_per_step(&self) -> usize {
        match self {
            Solver::EulerDdim
            | Solver::Ipndm { .. }
            | Solver::IpndmFixed { .. }
            | Solver::DpmPp2m => 1,
            Solver::HeunEdm | Solver::Dpm2 { .. } => 2,
        }
    }

    pub fn is_multistep(&self) -> bool {
        matches!(
            self,
            Solver::Ipndm { .. } | Solver::IpndmFixed { .. } | Solver::DpmPp2m
        )
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Solver::EulerDdim => write!(f, "euler"),
            Solver::HeunEdm => write!(f, "heun"),
            Solver::Dpm2 { r } => write!(f, "dpm2:{r}"),
            Solver::Ipndm { order } => write!(f, "ipndm:{order}"),
            Solver::IpndmFixed { order } => write!(f, "ipndm_fixed:{order}"),
            Solver::DpmPp2m => write!(f, "dpmpp2m"),
        }
    }
}

impl FromStr for Solver {
    type Err = Error;

    /// Accepts `euler`, `heun`, `dpm2[:r]`, `ipndm[:order]`, `dpmpp2m` and a few aliases.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let bad = |what: &str| Error::Config(format!("bad {what} in solver spec '{s}'"));
        let solver = match (name.to_ascii_lowercase().as_str(), arg) {
            ("euler" | "ddim" | "euler_ddim", None) => Solver::EulerDdim,
            ("heun" | "edm" | "heun_edm", None) => Solver::HeunEdm,
            ("dpm2" | "dpm_solver_2", None) => Solver::DPM2_DEFAULT,
            ("dpm2" | "dpm_solver_2", Some(a)) => Solver::Dpm2 {
                r: a.parse().map_err(|_| bad("r"))?,
            },
            ("ipndm", None) => Solver::Ipndm { order: 4 },
            ("ipndm", Some(a)) => Solver::Ipndm {
                order: a.parse().map_err(|_| bad("order"))?,
            },
            ("ipndm_fixed", None) => Solver::IpndmFixed { order: 4 },
            ("ipndm_fixed", Some(a)) => Solver::IpndmFixed {
                order: a.parse().map_err(|_| bad("order"))?,
            },
            ("dpmpp2m" | "dpmpp_2m" | "dpm++2m", None) => Solver::DpmPp2m,
            _ => return Err(Error::Config(format!("unknown solver '{s}'"))),
        };
        solver.validate()?;
        Ok(solver)
    }
}

/// A solver plus the analytical-first-step switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub solver: Solver,
    pub afs: bool,
}

impl SamplerSpec {
    pub fn new(solver: Solver) -> Self {
        Self { solver, afs: false }
    }

    pub fn with_afs(mut self, afs: bool) -> Self {
        self.afs = afs;
        self
    }

    /// Evaluations for a run over `n_nodes` schedule nodes.
    pub fn nfe(&self, n_nodes: usize) -> usize {
        (n_nodes - 1) * self.solver.evals_per_step() - usize::from(self.afs && n_nodes > 1)
    }
}

/// History threaded between steps of multistep solvers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Carry {
    /// Past `(time, noise prediction)` pairs, newest first, at most three.
    pub eps_history: Vec<(f64, DVector<f64>)>,
    /// Time and data prediction from the previous step.
    pub prev_denoised: Option<(f64, DVector<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub x_next: DVector<f64>,
    pub evals: Vec<Eval>,
}

#[inline]
pub(crate) fn axpy(x: &DVector<f64>, h: f64, v: &DVector<f64>) -> DVector<f64> {
    x + v * h
}

pub(crate) fn check_interval(t_hi: f64, t_lo: f64) -> Result<()> {
    if !(t_lo > 0.0 && t_hi > t_lo && t_hi.is_finite()) {
        return Err(Error::Domain(format!(
            "need 0 < t_lo < t_hi, got t_lo={t_lo}, t_hi={t_hi}"
        )));
    }
    Ok(())
}

/// Direction used in place of the first evaluation: `x / t`.
pub fn afs_direction(x: &DVector<f64>, t: f64) -> DVector<f64> {
    x / t
}

pub(crate) fn afs_eval(x: &DVector<f64>, t: f64) -> ModelEval {
    ModelEval::from_epsilon(x, t, afs_direction(x, t), Vec::new())
}

pub(crate) fn eval_recorded<M: ScoreModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    t: f64,
    evals: &mut Vec<Eval>,
) -> Result<ModelEval> {
    let e = model.eval(x, t)?;
    evals.push(Eval {
        t,
        epsilon: e.epsilon.clone(),
    });
    Ok(e)
}

/// Predictor to `s`, corrector combining slopes with weights `(1/(2r), 1 - 1/(2r))`.
#[allow(clippy::too_many_arguments)]
fn two_stage<M: ScoreModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    t_hi: f64,
    t_lo: f64,
    r: f64,
    first: &ModelEval,
    scale: f64,
    evals: &mut Vec<Eval>,
) -> Result<DVector<f64>> {
    let s = geometric_unchecked(t_lo, t_hi, r);
    let x_s = axpy(x, s - t_hi, &first.epsilon);
    let mid = eval_recorded(model, &x_s, s, evals)?;
    let w = 1.0 / (2.0 * r);
    let slope = &mid.epsilon * w + &first.epsilon * (1.0 - w);
    Ok(axpy(x, scale * (t_lo - t_hi), &slope))
}

/// Advance one step given the evaluation `first` taken at the start of the step.
///
/// `scale` multiplies the final update direction; only the learned plugin sets it
/// away from one. Evaluations beyond `first` are appended to `evals`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn advance<M: ScoreModel + ?Sized>(
    model: &M,
    solver: Solver,
    carry: &mut Carry,
    x: &DVector<f64>,
    t_hi: f64,
    t_lo: f64,
    first: &ModelEval,
    scale: f64,
    evals: &mut Vec<Eval>,
) -> Result<DVector<f64>> {
    let x_next = match solver {
        Solver::EulerDdim => axpy(x, scale * (t_lo - t_hi), &first.epsilon),
        Solver::HeunEdm => two_stage(model, x, t_hi, t_lo, 1.0, first, scale, evals)?,
        Solver::Dpm2 { r } => two_stage(model, x, t_hi, t_lo, r, first, scale, evals)?,
        Solver::Ipndm { order } | Solver::IpndmFixed { order } => {
            if carry.eps_history.len() > 3 {
                return Err(Error::Contract(format!(
                    "ipndm history holds at most 3 slopes, got {}",
                    carry.eps_history.len()
                )));
            }
            let used = order.min(carry.eps_history.len() + 1);
            let past = &carry.eps_history[..used - 1];
            let weights = match solver {
                Solver::IpndmFixed { .. } => AB_COEFFS[used - 1].to_vec(),
                _ => {
                    let mut nodes = vec![t_hi];
                    nodes.extend(past.iter().map(|(t, _)| *t));
                    if nodes.windows(2).any(|w| w[1] <= w[0]) {
                        return Err(Error::Contract(
                            "ipndm history times must be strictly decreasing into the past".into(),
                        ));
                    }
                    adams_bashforth_weights(&nodes, t_lo)
                }
            };
            let mut slope = &first.epsilon * weights[0];
            for (w, (_, eps)) in weights[1..].iter().zip(past) {
                slope += eps * *w;
            }
            carry.eps_history.insert(0, (t_hi, first.epsilon.clone()));
            carry.eps_history.truncate(3);
            axpy(x, scale * (t_lo - t_hi), &slope)
        }
        Solver::DpmPp2m => {
            let lambda = |t: f64| -t.ln();
            let h = lambda(t_lo) - lambda(t_hi);
            if !h.is_finite() || h <= 0.0 {
                return Err(Error::Schedule(format!(
                    "bad log-SNR step {h} on [{t_lo}, {t_hi}]"
                )));
            }
            let combo = match &carry.prev_denoised {
                None => first.denoised.clone(),
                Some((t_prev, d_prev)) => {
                    if *t_prev <= t_hi {
                        return Err(Error::Contract(format!(
                            "previous time {t_prev} must exceed current {t_hi}"
                        )));
                    }
                    let r0 = (lambda(t_hi) - lambda(*t_prev)) / h;
                    let k = 1.0 / (2.0 * r0);
                    &first.denoised * (1.0 + k) - d_prev * k
                }
            };
            carry.prev_denoised = Some((t_hi, first.denoised.clone()));
            x * (t_lo / t_hi) - combo * (((-h).exp() - 1.0) * scale)
        }
    };
    if x_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite state".into()));
    }
    Ok(x_next)
}

fn single_step<M: ScoreModel + ?Sized>(
    model: &M,
    solver: Solver,
    carry: &mut Carry,
    x: &DVector<f64>,
    t_hi: f64,
    t_lo: f64,
) -> Result<StepOutput> {
    check_interval(t_hi, t_lo)?;
    solver.validate()?;
    let mut evals = Vec::with_capacity(2);
    let first = eval_recorded(model, x, t_hi, &mut evals)?;
    let x_next = advance(model, solver, carry, x, t_hi, t_lo, &first, 1.0, &mut evals)?;
    Ok(StepOutput { x_next, evals })
}

/// DDIM: `x + (t_lo - t_hi) eps(x, t_hi)`.
pub fn step_euler<M: ScoreModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    t_hi: f64,
    t_lo: f64,
) -> Result<StepOutput> {
    single_step(
        model,
        Solver::EulerDdim,
        &mut Carry::default(),
        x,
        t_hi,
        t_lo,
    )
}

/// EDM Heun step: Euler predictor to `t_lo`, then the average of both slopes.
pub fn step_heun<M: ScoreModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    t_hi: f64,
    t_lo: f64,
) -> Result<StepOutput> {
    single_step(model, Solver::HeunEdm, &mut Carry::default(), x, t_hi, t_lo)
}

pub fn step_dpm2<M: ScoreModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    t_hi: f64,
    t_lo: f64,
    r: f64,
) -> Result<StepOutput> {
    geometric_intermediate(t_lo, t_hi, r)?;
    single_step(
        model,
        Solver::Dpm2 { r },
        &mut Carry::default(),
        x,
        t_hi,
        t_lo,
    )
}

/// iPNDM step of the highest order the history allows (at most 4).
///
/// `history` holds past `(time, noise prediction)` pairs, newest first.
pub fn step_ipndm<M: ScoreModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    t_hi: f64,
    t_lo: f64,
    history: &[(f64, DVector<f64>)],
) -> Result<StepOutput> {
    if history.len() > 3 {
        return Err(Error::Contract(format!(
            "ipndm history holds at most 3 slopes, got {}",
            history.len()
        )));
    }
    let mut carry = Carry {
        eps_history: history.to_vec(),
        prev_denoised: None,
    };
    single_step(model, Solver::Ipndm { order: 4 }, &mut carry, x, t_hi, t_lo)
}

/// DPM-Solver++(2M); `prev` is the time and data prediction of the previous step.
pub fn step_dpmpp_2m<M: ScoreModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    t_hi: f64,
    t_lo: f64,
    prev: Option<(f64, &DVector<f64>)>,
) -> Result<StepOutput> {
    let mut carry = Carry {
        eps_history: Vec::new(),
        prev_denoised: prev.map(|(t, d)| (t, d.clone())),
    };
    single_step(model, Solver::DpmPp2m, &mut carry, x, t_hi, t_lo)
}

/// Run a full sampling trajectory from `x_t_max` at `t_N` down to `t_1`.
pub fn sample<M: ScoreModel + ?Sized>(
    model: &M,
    spec: SamplerSpec,
    schedule: &TimeSchedule,
    x_t_max: &DVector<f64>,
) -> Result<Trajectory> {
    spec.solver.validate()?;
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
    for (i, (t_hi, t_lo)) in schedule.intervals_desc().enumerate() {
        let step = |evals: &mut Vec<Eval>, carry: &mut Carry| -> Result<DVector<f64>> {
            let first = if i == 0 && spec.afs {
                afs_eval(&x, t_hi)
            } else {
                eval_recorded(model, &x, t_hi, evals)?
            };
            advance(
                model,
                spec.solver,
                carry,
                &x,
                t_hi,
                t_lo,
                &first,
                1.0,
                evals,
            )
        };
        x = step(&mut evals, &mut carry).map_err(|e| e.at_step(i, t_lo, t_hi))?;
        nodes.push((t_lo, x.clone()));
    }
    Ok(Trajectory {
        nodes,
        nfe: evals.len(),
        evals,
        plans: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, ScheduleKind};
    use crate::score::{exact_trajectory, GaussianMixture};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    /// eps(x, t) = k everywhere.
    struct ConstantField(DVector<f64>);

    impl ScoreModel for ConstantField {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn eval(&self, x: &DVector<f64>, t: f64) -> Result<ModelEval> {
            Ok(ModelEval::from_epsilon(x, t, self.0.clone(), vec![1.0]))
        }
    }

    /// D(x, t) = d everywhere, so eps = (x - d) / t.
    struct ConstantDenoiser(DVector<f64>);

    impl ScoreModel for ConstantDenoiser {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn eval(&self, x: &DVector<f64>, t: f64) -> Result<ModelEval> {
            Ok(ModelEval::from_epsilon(x, t, (x - &self.0) / t, vec![1.0]))
        }
    }

    fn unit_gaussian() -> GaussianMixture {
        GaussianMixture::gaussian(v(&[0.0, 0.0]), 1.0).unwrap()
    }

    #[test]
    fn euler_example() {
        let out = step_euler(&unit_gaussian(), &v(&[2.0, 0.0]), 1.0, 0.5).unwrap();
        assert!((out.x_next - v(&[1.5, 0.0])).norm() < 1e-15);
        assert_eq!(out.evals.len(), 1);
        assert!(step_euler(&unit_gaussian(), &v(&[2.0, 0.0]), 1.0, 1.0).is_err());
    }

    #[test]
    fn stationary_point_is_kept() {
        let m = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![v(&[1.0, 0.0]), v(&[-1.0, 0.0])],
            vec![1.0, 1.0],
        )
        .unwrap();
        let x = v(&[0.0, 0.0]);
        assert_eq!(step_euler(&m, &x, 3.0, 1.0).unwrap().x_next, x);
        assert_eq!(step_heun(&m, &x, 3.0, 1.0).unwrap().x_next, x);
    }

    #[test]
    fn heun_is_dpm2_with_r_one() {
        let m = GaussianMixture::ring(3, 4, 1.5, 0.4).unwrap();
        let x = v(&[3.0, -2.0, 0.5, 7.0]);
        for (hi, lo) in [(80.0, 10.0), (2.0, 0.3), (0.05, 0.002)] {
            let a = step_heun(&m, &x, hi, lo).unwrap();
            let b = step_dpm2(&m, &x, hi, lo, 1.0).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.evals.len(), 2);
        }
    }

    #[test]
    fn dpm2_default_uses_midpoint_slope_only() {
        let m = GaussianMixture::ring(3, 2, 1.0, 0.5).unwrap();
        let x = v(&[1.0, 2.0]);
        let out = step_dpm2(&m, &x, 4.0, 1.0, 0.5).unwrap();
        assert_eq!(out.evals[1].t, 2.0);
        let expect = axpy(&x, 1.0 - 4.0, &out.evals[1].epsilon);
        assert_eq!(out.x_next, expect);
        assert!(step_dpm2(&m, &x, 4.0, 1.0, 0.0).is_err());
        assert!(step_dpm2(&m, &x, 4.0, 1.0, 1.2).is_err());
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let k = v(&[0.3, -1.2, 2.0]);
        let field = ConstantField(k.clone());
        let x = v(&[1.0, 2.0, 3.0]);
        let (hi, lo) = (5.0, 1.25);
        let expect = &x + &k * (lo - hi);
        let tol = 1e-12;
        assert!((step_euler(&field, &x, hi, lo).unwrap().x_next - &expect).norm() < tol);
        assert!((step_heun(&field, &x, hi, lo).unwrap().x_next - &expect).norm() < tol);
        for r in [0.1, 0.5, 0.9] {
            assert!((step_dpm2(&field, &x, hi, lo, r).unwrap().x_next - &expect).norm() < tol);
        }
        let hist = [(6.0, k.clone()), (8.0, k.clone()), (11.0, k.clone())];
        for n in 0..=3 {
            let out = step_ipndm(&field, &x, hi, lo, &hist[..n]).unwrap();
            assert!((out.x_next - &expect).norm() < tol, "order {}", n + 1);
        }
    }

    #[test]
    fn ipndm_without_history_is_euler() {
        let m = GaussianMixture::ring(4, 3, 2.0, 0.7).unwrap();
        let x = v(&[10.0, -4.0, 1.0]);
        assert_eq!(
            step_ipndm(&m, &x, 7.0, 3.0, &[]).unwrap(),
            step_euler(&m, &x, 7.0, 3.0).unwrap()
        );
        let long: Vec<_> = (0..4).map(|i| (10.0 + i as f64, x.clone())).collect();
        assert!(matches!(
            step_ipndm(&m, &x, 7.0, 3.0, &long),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn variable_weights_reduce_to_classical_on_uniform_grid() {
        for order in 1..=4 {
            let nodes: Vec<f64> = (0..order).map(|j| 10.0 + 0.5 * j as f64).collect();
            let w = adams_bashforth_weights(&nodes, 9.5);
            for (a, b) in w.iter().zip(AB_COEFFS[order - 1]) {
                assert!((a - b).abs() < 1e-12, "order {order}: {w:?}");
            }
        }
    }

    #[test]
    fn variable_weights_integrate_cubics_exactly() {
        let nodes = [5.0, 7.5, 8.0, 12.0];
        let t_next = 3.2;
        let w = adams_bashforth_weights(&nodes, t_next);
        let p = |t: f64| 0.3 * t * t * t - t * t + 2.0 * t - 1.0;
        let antideriv = |t: f64| 0.075 * t.powi(4) - t.powi(3) / 3.0 + t * t - t;
        let h = t_next - nodes[0];
        let quad: f64 = w.iter().zip(&nodes).map(|(w, t)| w * p(*t)).sum::<f64>() * h;
        assert!((quad - (antideriv(t_next) - antideriv(nodes[0]))).abs() < 1e-10);
    }

    #[test]
    fn fixed_coefficients_variant() {
        let k = v(&[1.0, -1.0]);
        let field = ConstantField(k.clone());
        let x = v(&[0.0, 0.0]);
        let mut carry = Carry {
            eps_history: vec![(6.0, k.clone()), (9.0, k.clone())],
            prev_denoised: None,
        };
        let first = field.eval(&x, 4.0).unwrap();
        let out = advance(
            &field,
            Solver::IpndmFixed { order: 4 },
            &mut carry,
            &x,
            4.0,
            2.0,
            &first,
            1.0,
            &mut vec![],
        )
        .unwrap();
        assert!((out - &k * -2.0).norm() < 1e-12);
        assert_eq!(carry.eps_history.len(), 3);
    }

    #[test]
    fn dpmpp_first_order_exact_on_constant_denoiser() {
        let d = v(&[0.5, -1.0]);
        let model = ConstantDenoiser(d.clone());
        let x = v(&[40.0, 12.0]);
        let (hi, lo) = (80.0, 3.0);
        let out = step_dpmpp_2m(&model, &x, hi, lo, None).unwrap();
        // exact flow: x(t) = d + (x_T - d) t / T
        let exact = &d + (&x - &d) * (lo / hi);
        assert!((out.x_next - exact).norm() < 1e-12);
    }

    #[test]
    fn dpmpp_equal_history_reduces_to_first_order() {
        let d = v(&[0.5, -1.0]);
        let model = ConstantDenoiser(d.clone());
        let x = v(&[4.0, 1.0]);
        let one = step_dpmpp_2m(&model, &x, 2.0, 1.0, None).unwrap();
        let two = step_dpmpp_2m(&model, &x, 2.0, 1.0, Some((5.0, &d))).unwrap();
        assert!((one.x_next - two.x_next).norm() < 1e-12);
        assert!(step_dpmpp_2m(&model, &x, 2.0, 1.0, Some((1.5, &d))).is_err());
    }

    #[test]
    fn afs_direction_examples() {
        assert_eq!(afs_direction(&v(&[0.0, 0.0]), 80.0), v(&[0.0, 0.0]));
        let m = GaussianMixture::gaussian(v(&[0.0, 0.0]), 1e-9).unwrap();
        let x = v(&[30.0, -5.0]);
        let e = m.eval(&x, 80.0).unwrap().epsilon;
        assert!((afs_direction(&x, 80.0) - e).norm() < 1e-15);
    }

    #[test]
    fn nfe_accounting() {
        let m = GaussianMixture::ring(2, 2, 1.0, 0.5).unwrap();
        let solvers = [
            Solver::EulerDdim,
            Solver::HeunEdm,
            Solver::DPM2_DEFAULT,
            Solver::Ipndm { order: 4 },
            Solver::DpmPp2m,
        ];
        for n in 2..7 {
            let sched =
                make_schedule(ScheduleKind::Polynomial { rho: 7.0 }, n, 0.002, 80.0).unwrap();
            for solver in solvers {
                for afs in [false, true] {
                    let spec = SamplerSpec::new(solver).with_afs(afs);
                    let traj = sample(&m, spec, &sched, &v(&[20.0, -50.0])).unwrap();
                    assert_eq!(traj.nfe, spec.nfe(n));
                    assert_eq!(traj.nfe, (n - 1) * solver.evals_per_step() - afs as usize);
                    assert_eq!(traj.evals.len(), traj.nfe);
                    assert_eq!(traj.nodes.len(), n);
                    assert_eq!(traj.nodes[0].0, 80.0);
                    assert_eq!(traj.nodes[n - 1].0, 0.002);
                }
            }
        }
    }

    #[test]
    fn higher_order_beats_euler_on_single_gaussian() {
        let m = unit_gaussian();
        let xt = v(&[60.0, -45.0]);
        let sched = make_schedule(ScheduleKind::Polynomial { rho: 7.0 }, 9, 0.002, 80.0).unwrap();
        let exact = exact_trajectory(&m, &xt, 0.002, 80.0).unwrap();
        let err = |s: Solver| {
            (sample(&m, SamplerSpec::new(s), &sched, &xt)
                .unwrap()
                .endpoint()
                - &exact)
                .norm()
        };
        let euler = err(Solver::EulerDdim);
        assert!(err(Solver::Ipndm { order: 4 }) < euler);
        assert!(err(Solver::DpmPp2m) < euler);
    }

    #[test]
    fn parse_and_display() {
        for s in [
            "euler",
            "heun",
            "dpm2:0.5",
            "ipndm:3",
            "ipndm_fixed:2",
            "dpmpp2m",
        ] {
            let solver: Solver = s.parse().unwrap();
            assert_eq!(solver.to_string(), s);
        }
        assert_eq!("dpm2".parse::<Solver>().unwrap(), Solver::DPM2_DEFAULT);
        assert!("dpm2:0".parse::<Solver>().is_err());
        assert!("ipndm:5".parse::<Solver>().is_err());
        assert!("rk45".parse::<Solver>().is_err());
    }

    #[test]
    fn divergence_is_reported_with_step_context() {
        struct Exploding;
        impl ScoreModel for Exploding {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, x: &DVector<f64>, t: f64) -> Result<ModelEval> {
                Ok(ModelEval::from_epsilon(x, t, x * 1e308, vec![]))
            }
        }
        let sched = make_schedule(ScheduleKind::Uniform, 3, 0.1, 10.0).unwrap();
        let err = sample(
            &Exploding,
            SamplerSpec::new(Solver::EulerDdim),
            &sched,
            &v(&[5.0]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Step { step: 0, .. }), "{err}");
    }
}
