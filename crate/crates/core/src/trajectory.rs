use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// One recorded model evaluation: the time it was taken at and the noise prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Eval {
    pub t: f64,
    pub epsilon: DVector<f64>,
}

/// Intermediate times and direction scales used inside one solver step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub intermediates: Vec<f64>,
    pub scales: Vec<f64>,
    pub time_scales: Vec<f64>,
}

impl StepPlan {
    pub fn single(s: f64, c: f64, a: f64) -> Self {
        Self {
            intermediates: vec![s],
            scales: vec![c],
            time_scales: vec![a],
        }
    }
}

/// States of one sampling run at the schedule nodes, newest (largest t) first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub nodes: Vec<(f64, DVector<f64>)>,
    pub evals: Vec<Eval>,
    pub nfe: usize,
    /// Learned step plans, one per interval; empty for fixed solvers.
    pub plans: Vec<StepPlan>,
}

impl Trajectory {
    pub fn endpoint(&self) -> &DVector<f64> {
        &self.nodes.last().expect("trajectory has no nodes").1
    }

    pub fn dim(&self) -> usize {
        self.nodes.first().map(|(_, x)| x.len()).unwrap_or(0)
    }

    /// State at the node with index `i` counted from the small-time end (t_1 is index 0).
    pub fn state_ascending(&self, i: usize) -> &DVector<f64> {
        &self.nodes[self.nodes.len() - 1 - i].1
    }
}
