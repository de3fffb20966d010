//! Analytic diffusion models.
//!
//! Under the variance-exploding setup used here (zero drift, `sigma(t) = t`),
//! perturbing an isotropic Gaussian mixture with `N(0, t^2 I)` gives another
//! mixture whose k-th component has variance `s_k^2 + t^2`. Its score, noise
//! prediction and denoiser are all closed form, which makes the mixture a
//! stand-in for a trained network with an exact answer key.

use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::gaussian_vector;
use crate::schedule::{refine_teacher, TimeSchedule};
use crate::trajectory::Trajectory;

/// Output of one model call.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEval {
    /// Noise prediction `eps(x, t)`.
    pub epsilon: DVector<f64>,
    /// Data prediction, always `x - t * epsilon`.
    pub denoised: DVector<f64>,
    /// Posterior responsibilities of the perturbed mixture; the bottleneck analog.
    pub feature: Vec<f64>,
}

impl ModelEval {
    /// Assemble an evaluation from a noise prediction, deriving the denoiser.
    pub fn from_epsilon(
        x: &DVector<f64>,
        t: f64,
        epsilon: DVector<f64>,
        feature: Vec<f64>,
    ) -> Self {
        let denoised = x - &epsilon * t;
        Self {
            epsilon,
            denoised,
            feature,
        }
    }
}

/// Anything that can stand in for a trained noise-prediction network.
pub trait ScoreModel: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &DVector<f64>, t: f64) -> Result<ModelEval>;
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, x: &DVector<f64>, t: f64) -> Result<ModelEval> {
        (**self).eval(x, t)
    }
}

pub(crate) fn check_inputs(dim: usize, x: &DVector<f64>, t: f64) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::Evaluation(format!("non-finite time {t}")));
    }
    if t <= 0.0 {
        return Err(Error::Domain(format!("time must be positive, got {t}")));
    }
    if x.len() != dim {
        return Err(Error::Evaluation(format!(
            "state has length {}, model dimension is {dim}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("non-finite state".into()));
    }
    Ok(())
}

/// One mixture component as it appears in a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    #[serde(alias = "component")]
    components: Vec<Component>,
}

/// Isotropic Gaussian mixture `sum_k w_k N(mu_k, s_k^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    stds: Vec<f64>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, stds: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || stds.len() != k {
            return Err(Error::Parameter(format!(
                "mixture needs matching non-empty weights/means/stds, got {}/{}/{}",
                k,
                means.len(),
                stds.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Parameter("weights must be strictly positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("weights sum to {total}, not 1")));
        }
        if stds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter(
                "component stds must be strictly positive".into(),
            ));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Parameter(
                "all means must share one non-zero length".into(),
            ));
        }
        if means.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Parameter("means must be finite".into()));
        }
        Ok(Self {
            weights,
            means,
            stds,
            dim,
        })
    }

    /// Single Gaussian `N(mean, std^2 I)`.
    pub fn gaussian(mean: DVector<f64>, std: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![std])
    }

    /// `k` equally weighted components with means evenly spaced on a circle of
    /// `radius` in the first two coordinates. The mixture mean is zero for `k >= 2`.
    pub fn ring(k: usize, dim: usize, radius: f64, std: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Parameter("ring mixtures need dim >= 2".into()));
        }
        let means = (0..k)
            .map(|i| {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                let mut m = DVector::zeros(dim);
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
                m
            })
            .collect();
        Self::new(vec![1.0 / k as f64; k], means, vec![std; k])
    }

    pub fn from_components(components: &[Component]) -> Result<Self> {
        Self::new(
            components.iter().map(|c| c.weight).collect(),
            components
                .iter()
                .map(|c| DVector::from_vec(c.mean.clone()))
                .collect(),
            components.iter().map(|c| c.std).collect(),
        )
    }

    pub fn components(&self) -> Vec<Component> {
        (0..self.k())
            .map(|i| Component {
                weight: self.weights[i],
                mean: self.means[i].iter().copied().collect(),
                std: self.stds[i],
            })
            .collect()
    }

    /// Load from a TOML (`[[components]]` tables) or JSON (`{"components": [...]}`) file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?
        } else {
            toml::from_str(&text).map_err(|e| Error::parse(path, e))?
        };
        Self::from_components(&file.components)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = ModelFile {
            components: self.components(),
        };
        let text = if path.extension().is_some_and(|e| e == "json") {
            serde_json::to_string_pretty(&file).map_err(|e| Error::parse(path, e))?
        } else {
            toml::to_string(&file).map_err(|e| Error::parse(path, e))?
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    /// Mixture mean `sum_k w_k mu_k`.
    pub fn mean(&self) -> DVector<f64> {
        self.means
            .iter()
            .zip(&self.weights)
            .fold(DVector::zeros(self.dim), |acc, (m, w)| acc + m * *w)
    }

    /// Unnormalised log-densities of every component of the `t`-perturbed mixture.
    fn log_joint(&self, x: &DVector<f64>, t: f64) -> Vec<f64> {
        let half_d = 0.5 * self.dim as f64;
        (0..self.k())
            .map(|i| {
                let var = self.stds[i] * self.stds[i] + t * t;
                let sq = (x - &self.means[i]).norm_squared();
                self.weights[i].ln() - half_d * var.ln() - 0.5 * sq / var
            })
            .collect()
    }

    /// Posterior responsibilities `gamma_k(x, t)` of the perturbed mixture.
    pub fn responsibilities(&self, x: &DVector<f64>, t: f64) -> Vec<f64> {
        normalize_log_weights(&self.log_joint(x, t))
    }

    /// Draw one exact sample from the (unperturbed) data distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.k() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        &self.means[pick] + gaussian_vector(rng, self.dim, self.stds[pick])
    }
}

/// Softmax of log-weights with the max subtracted first.
pub fn normalize_log_weights(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl ScoreModel for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>, t: f64) -> Result<ModelEval> {
        check_inputs(self.dim, x, t)?;
        let gamma = self.responsibilities(x, t);
        let mut weighted = DVector::zeros(self.dim);
        for (i, g) in gamma.iter().enumerate() {
            let var = self.stds[i] * self.stds[i] + t * t;
            weighted += (x - &self.means[i]) * (g / var);
        }
        let epsilon = weighted * t;
        Ok(ModelEval::from_epsilon(x, t, epsilon, gamma))
    }
}

/// Closed-form probability-flow solution for a single Gaussian, from `x_T` at `t_max` to `t`.
pub fn exact_trajectory(
    model: &GaussianMixture,
    x_t_max: &DVector<f64>,
    t: f64,
    t_max: f64,
) -> Result<DVector<f64>> {
    if model.k() != 1 {
        return Err(Error::UnsupportedModel(format!(
            "closed-form trajectory needs a single component, model has {}",
            model.k()
        )));
    }
    if !(t > 0.0 && t <= t_max) {
        return Err(Error::Domain(format!(
            "need 0 < t <= T, got t={t}, T={t_max}"
        )));
    }
    let mu = &model.means[0];
    let s2 = model.stds[0] * model.stds[0];
    let ratio = ((s2 + t * t) / (s2 + t_max * t_max)).sqrt();
    Ok(mu + (x_t_max - mu) * ratio)
}

/// Reference solution by classical RK4 with `substeps` sub-intervals per schedule
/// interval, spaced by the schedule's own rule.
pub fn oracle_solve<M: ScoreModel + ?Sized>(
    model: &M,
    x_t_max: &DVector<f64>,
    schedule: &TimeSchedule,
    substeps: usize,
) -> Result<Trajectory> {
    if substeps < 32 {
        return Err(Error::Parameter(format!(
            "oracle needs at least 32 substeps per interval, got {substeps}"
        )));
    }
    rk4_on_grid(model, x_t_max, schedule, substeps)
}

pub(crate) fn rk4_on_grid<M: ScoreModel + ?Sized>(
    model: &M,
    x_t_max: &DVector<f64>,
    schedule: &TimeSchedule,
    substeps: usize,
) -> Result<Trajectory> {
    let fine = refine_teacher(schedule, substeps - 1)?;
    let times = fine.descending();
    let mut x = x_t_max.clone();
    let mut nodes = vec![(times[0], x.clone())];
    let mut nfe = 0;
    let f = |x: &DVector<f64>, t: f64| model.eval(x, t).map(|e| e.epsilon);
    for (j, w) in times.windows(2).enumerate() {
        let (t0, t1) = (w[0], w[1]);
        let h = t1 - t0;
        let interval = |e: Error| {
            let k = j / substeps;
            let (hi, lo) = (times[k * substeps], times[(k + 1) * substeps]);
            Error::Divergence {
                t_lo: lo,
                t_hi: hi,
                reason: e.to_string(),
            }
        };
        let k1 = f(&x, t0).map_err(interval)?;
        let k2 = f(&(&x + &k1 * (0.5 * h)), t0 + 0.5 * h).map_err(interval)?;
        let k3 = f(&(&x + &k2 * (0.5 * h)), t0 + 0.5 * h).map_err(interval)?;
        let k4 = f(&(&x + &k3 * h), t1).map_err(interval)?;
        nfe += 4;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(interval(Error::Numeric("non-finite state".into())));
        }
        if (j + 1) % substeps == 0 {
            nodes.push((t1, x.clone()));
        }
    }
    Ok(Trajectory {
        nodes,
        evals: Vec::new(),
        nfe,
        plans: Vec::new(),
    })
}
