//! Distillation of the predictor against a refined teacher trajectory.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::predictor::{PredictorConfig, PredictorOutput, PredictorParams};
use super::step::{amed_sample, apply, AmedKind};
use crate::error::{Error, Result};
use crate::rng::{prior_batch, tags, SeedTree};
use crate::schedule::{refine_teacher, TimeSchedule};
use crate::score::{ModelEval, ScoreModel};
use crate::solvers::{afs_eval, sample, Carry, SamplerSpec, Solver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    L2,
}

impl Metric {
    pub fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        match self {
            Metric::L2 => (a - b).norm(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub teacher: SamplerSpec,
    pub student: AmedKind,
    /// Extra teacher steps inserted per interval.
    pub m: usize,
    pub batch: usize,
    /// Total prior draws; the loop count is `ceil(images / batch)`.
    pub images: usize,
    pub lr: f64,
    pub seed: u64,
    pub metric: Metric,
    /// Student replaces its first evaluation with `x / t`.
    pub afs: bool,
    pub predictor: PredictorConfig,
    /// Relative step for output sensitivities.
    pub fd_step: f64,
}

impl TrainConfig {
    /// Teacher is the student's base (dpm2 for the stand-alone solver) with
    /// M=1 for dpm2 and M=2 otherwise.
    pub fn recipe(student: AmedKind) -> Self {
        let base = match student {
            AmedKind::MeanDirection => Solver::DPM2_DEFAULT,
            AmedKind::Plugin { base } => base,
        };
        let m = if matches!(base, Solver::Dpm2 { .. }) {
            1
        } else {
            2
        };
        Self {
            teacher: SamplerSpec::new(base),
            student,
            m,
            batch: 64,
            images: 10_000,
            lr: 1e-3,
            seed: 0,
            metric: Metric::L2,
            afs: false,
            predictor: PredictorConfig::default(),
            fd_step: 1e-3,
        }
    }

    pub fn loops(&self) -> usize {
        self.images.div_ceil(self.batch.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::Config("M must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.fd_step > 0.0 && self.fd_step < 0.5) {
            return Err(Error::Config(format!(
                "fd_step must lie in (0, 0.5), got {}",
                self.fd_step
            )));
        }
        self.teacher.solver.validate()?;
        self.student.validate()?;
        self.predictor.validate()
    }
}

/// Per-sample student state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentState {
    pub x: DVector<f64>,
    pub carry: Carry,
}

impl StudentState {
    pub fn new(x: DVector<f64>) -> Self {
        Self {
            x,
            carry: Carry::default(),
        }
    }
}

/// One interval of a batch, with teacher targets at `t_lo`.
#[derive(Debug, Clone, Copy)]
pub struct StepBatch<'a> {
    pub students: &'a [StudentState],
    pub targets: &'a [DVector<f64>],
    pub t_hi: f64,
    pub t_lo: f64,
    /// Use `x / t` instead of evaluating the model at the start of the step.
    pub analytic_first: bool,
}

#[derive(Debug, Clone)]
pub struct StepGradient {
    pub loss: f64,
    pub gradient: PredictorParams,
    /// Student states after the step, taken with the parameters before any update.
    pub next: Vec<StudentState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub loop_index: usize,
    /// Interval index counted from t_max.
    pub step: usize,
    pub t_hi: f64,
    pub t_lo: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: PredictorParams,
    pub losses: Vec<LossRecord>,
    pub updates: usize,
}

fn first_eval<M: ScoreModel + ?Sized>(
    model: &M,
    batch: &StepBatch<'_>,
    x: &DVector<f64>,
) -> Result<ModelEval> {
    if batch.analytic_first {
        Ok(afs_eval(x, batch.t_hi))
    } else {
        model.eval(x, batch.t_hi)
    }
}

fn check_batch(batch: &StepBatch<'_>) -> Result<()> {
    if batch.students.len() != batch.targets.len() {
        return Err(Error::Contract(format!(
            "{} students but {} targets",
            batch.students.len(),
            batch.targets.len()
        )));
    }
    if batch.students.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(())
}

struct SampleStep {
    x_next: DVector<f64>,
    carry: Carry,
    loss: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_sample<M: ScoreModel + ?Sized>(
    model: &M,
    kind: AmedKind,
    metric: Metric,
    batch: &StepBatch<'_>,
    student: &StudentState,
    target: &DVector<f64>,
    first: &ModelEval,
    coeffs: PredictorOutput,
) -> Result<SampleStep> {
    let mut carry = student.carry.clone();
    let x_next = apply(
        model,
        kind,
        &mut carry,
        &student.x,
        batch.t_hi,
        batch.t_lo,
        first,
        coeffs,
        &mut Vec::new(),
    )?;
    let loss = metric.distance(&x_next, target);
    Ok(SampleStep {
        x_next,
        carry,
        loss,
    })
}

fn finite_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("non-finite training loss {loss}")))
    }
}

/// Batch-mean distance to the targets after one student step.
pub fn step_loss<M: ScoreModel + ?Sized>(
    model: &M,
    params: &PredictorParams,
    kind: AmedKind,
    metric: Metric,
    batch: &StepBatch<'_>,
) -> Result<f64> {
    check_batch(batch)?;
    let losses = batch
        .students
        .par_iter()
        .zip(batch.targets)
        .map(|(st, target)| {
            let first = first_eval(model, batch, &st.x)?;
            let coeffs = params
                .forward(&first.feature, batch.t_hi, batch.t_lo)?
                .output;
            Ok(run_sample(model, kind, metric, batch, st, target, &first, coeffs)?.loss)
        })
        .collect::<Result<Vec<f64>>>()?;
    finite_loss(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Ranges of `(r, c, a)`.
const OUTPUT_RANGES: [(f64, f64); 3] = [(0.0, 1.0), (0.0, 2.0), (0.5, 1.5)];

/// Loss and its parameter gradient: exact backprop through the predictor,
/// chained with central differences of the loss in the scalar outputs.
pub fn step_loss_and_gradient<M: ScoreModel + ?Sized>(
    model: &M,
    params: &PredictorParams,
    kind: AmedKind,
    metric: Metric,
    batch: &StepBatch<'_>,
    fd_step: f64,
) -> Result<StepGradient> {
    check_batch(batch)?;
    let per_sample = batch
        .students
        .par_iter()
        .zip(batch.targets)
        .map(|(st, target)| {
            let first = first_eval(model, batch, &st.x)?;
            let cache = params.forward(&first.feature, batch.t_hi, batch.t_lo)?;
            let base = run_sample(model, kind, metric, batch, st, target, &first, cache.output)?;
            let y = cache.output.to_vec();
            let mut dl_dy = Vec::with_capacity(y.len());
            for (k, &yk) in y.iter().enumerate() {
                let (lo, hi) = OUTPUT_RANGES[k];
                let delta = (fd_step * yk.abs())
                    .min(0.5 * (yk - lo))
                    .min(0.5 * (hi - yk));
                let shifted = |d: f64| -> Result<f64> {
                    let mut yy = y.clone();
                    yy[k] += d;
                    let coeffs = PredictorOutput::from_slice(&yy);
                    Ok(run_sample(model, kind, metric, batch, st, target, &first, coeffs)?.loss)
                };
                dl_dy.push((shifted(delta)? - shifted(-delta)?) / (2.0 * delta));
            }
            let grad = params.backward(&cache, &dl_dy);
            Ok((base, grad))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_sample.len() as f64;
    let mut gradient = PredictorParams::zeros(params.config)?;
    let mut loss = 0.0;
    let mut next = Vec::with_capacity(per_sample.len());
    for (step, grad) in per_sample {
        loss += step.loss;
        gradient.add_scaled(&grad, 1.0 / n);
        next.push(StudentState {
            x: step.x_next,
            carry: step.carry,
        });
    }
    Ok(StepGradient {
        loss: finite_loss(loss / n)?,
        gradient,
        next,
    })
}

/// Teacher states at the original schedule nodes, descending in t, per prior draw.
pub fn teacher_targets<M: ScoreModel + ?Sized>(
    model: &M,
    teacher: SamplerSpec,
    m: usize,
    schedule: &TimeSchedule,
    priors: &[DVector<f64>],
) -> Result<Vec<Vec<DVector<f64>>>> {
    let refined = refine_teacher(schedule, m)?;
    priors
        .par_iter()
        .map(|x| {
            let tr = sample(model, teacher, &refined, x)?;
            Ok(tr
                .nodes
                .iter()
                .step_by(m + 1)
                .map(|(_, x)| x.clone())
                .collect())
        })
        .collect()
}

fn targets_at(teacher: &[Vec<DVector<f64>>], node: usize) -> Vec<DVector<f64>> {
    teacher.iter().map(|nodes| nodes[node].clone()).collect()
}

/// Train the predictor. Each loop draws a fresh batch, runs the teacher, then
/// walks the student down the schedule with one parameter update per interval.
pub fn train<M: ScoreModel + ?Sized>(
    model: &M,
    cfg: &TrainConfig,
    schedule: &TimeSchedule,
) -> Result<TrainReport> {
    let init = PredictorParams::init_neutral(cfg.predictor, cfg.seed)?;
    train_from(model, cfg, schedule, init)
}

/// As [`train`], starting from given parameters.
pub fn train_from<M: ScoreModel + ?Sized>(
    model: &M,
    cfg: &TrainConfig,
    schedule: &TimeSchedule,
    mut params: PredictorParams,
) -> Result<TrainReport> {
    cfg.validate()?;
    let seeds = SeedTree::new(cfg.seed).child(tags::TRAIN);
    let mut losses = Vec::new();
    let mut updates = 0;
    for loop_index in 0..cfg.loops() {
        let count = cfg.batch.min(cfg.images - loop_index * cfg.batch);
        let priors = prior_batch(
            seeds.child(loop_index as u64),
            count,
            model.dim(),
            schedule.t_max(),
        );
        let teacher = teacher_targets(model, cfg.teacher, cfg.m, schedule, &priors)?;
        let mut students: Vec<StudentState> = priors.into_iter().map(StudentState::new).collect();
        for (step, (t_hi, t_lo)) in schedule.intervals_desc().enumerate() {
            let targets = targets_at(&teacher, step + 1);
            let batch = StepBatch {
                students: &students,
                targets: &targets,
                t_hi,
                t_lo,
                analytic_first: cfg.afs && step == 0,
            };
            let out = step_loss_and_gradient(
                model,
                &params,
                cfg.student,
                cfg.metric,
                &batch,
                cfg.fd_step,
            )
            .map_err(|e| e.at_step(step, t_lo, t_hi))?;
            params.add_scaled(&out.gradient, -cfg.lr);
            if !params.is_finite() {
                return Err(Error::Numeric(format!(
                    "parameters diverged at loop {loop_index}, step {step}"
                )));
            }
            updates += 1;
            losses.push(LossRecord {
                loop_index,
                step,
                t_hi,
                t_lo,
                loss: out.loss,
            });
            students = out.next;
        }
    }
    Ok(TrainReport {
        params,
        losses,
        updates,
    })
}

/// Training loss without updates, averaged over all intervals, on fixed priors.
pub fn evaluation_loss<M: ScoreModel + ?Sized>(
    model: &M,
    params: &PredictorParams,
    cfg: &TrainConfig,
    schedule: &TimeSchedule,
    priors: &[DVector<f64>],
) -> Result<f64> {
    let teacher = teacher_targets(model, cfg.teacher, cfg.m, schedule, priors)?;
    let mut students: Vec<StudentState> = priors.iter().cloned().map(StudentState::new).collect();
    let mut total = 0.0;
    for (step, (t_hi, t_lo)) in schedule.intervals_desc().enumerate() {
        let targets = targets_at(&teacher, step + 1);
        let batch = StepBatch {
            students: &students,
            targets: &targets,
            t_hi,
            t_lo,
            analytic_first: cfg.afs && step == 0,
        };
        let out =
            step_loss_and_gradient(model, params, cfg.student, cfg.metric, &batch, cfg.fd_step)?;
        total += out.loss;
        students = out.next;
    }
    Ok(total / (schedule.len() - 1) as f64)
}

/// Mean endpoint distance of learned sampling runs to reference endpoints.
pub fn mean_endpoint_error<M: ScoreModel + ?Sized>(
    model: &M,
    params: &PredictorParams,
    kind: AmedKind,
    schedule: &TimeSchedule,
    afs: bool,
    priors: &[DVector<f64>],
    references: &[DVector<f64>],
) -> Result<f64> {
    if priors.len() != references.len() || priors.is_empty() {
        return Err(Error::Contract(
            "need matching, non-empty prior and reference sets".into(),
        ));
    }
    let errs = priors
        .par_iter()
        .zip(references)
        .map(|(x, r)| {
            Ok((amed_sample(model, params, kind, schedule, x, afs)?.endpoint() - r).norm())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}
