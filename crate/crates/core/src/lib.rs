//! Fast probability-flow ODE samplers for diffusion models, evaluated on
//! analytic Gaussian-mixture score models.
//!
//! The crate covers the baseline single- and multi-step solvers, a learned
//! mean-direction step ([`amed`]) with its distillation loop, trajectory
//! geometry analyses, and a small experiment harness.

pub mod amed;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod solvers;
pub mod trajectory;

pub use error::{Error, Result};
pub use schedule::{
    geometric_intermediate, make_schedule, refine_teacher, ScheduleKind, TimeSchedule,
};
pub use score::{exact_trajectory, oracle_solve, GaussianMixture, ModelEval, ScoreModel};
pub use solvers::{sample, SamplerSpec, Solver};
pub use trajectory::{Eval, StepPlan, Trajectory};
