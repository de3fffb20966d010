use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{order_estimate, sliced_wasserstein};
use crate::error::{Error, Result};
use crate::rng::{prior_batch, tags, SeedTree};
use crate::schedule::{make_schedule, ScheduleKind, TimeSchedule};
use crate::score::{oracle_solve, GaussianMixture, ScoreModel};
use crate::solvers::{sample, SamplerSpec, Solver};

/// Schedule family and endpoints; the node count follows from each NFE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(flatten)]
    pub kind: ScheduleKind,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
}

fn default_t_min() -> f64 {
    0.002
}
fn default_t_max() -> f64 {
    80.0
}

impl ScheduleSpec {
    pub fn build(&self, n: usize) -> Result<TimeSchedule> {
        make_schedule(self.kind, n, self.t_min, self.t_max)
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Polynomial { rho: 7.0 },
            t_min: default_t_min(),
            t_max: default_t_max(),
        }
    }
}

mod solver_strings {
    use super::Solver;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Solver], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Solver>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Model file (TOML or JSON); relative paths resolve against the config file.
    pub model: PathBuf,
    #[serde(with = "solver_strings")]
    pub solvers: Vec<Solver>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub nfe: Vec<usize>,
    #[serde(default)]
    pub afs: bool,
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Unset means the caller picks; see [`RunConfig::out_dir`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_oracle_nodes")]
    pub oracle_nodes: usize,
    #[serde(default = "default_oracle_substeps")]
    pub oracle_substeps: usize,
    #[serde(default = "default_projections")]
    pub projections: usize,
}

fn default_oracle_nodes() -> usize {
    33
}
fn default_oracle_substeps() -> usize {
    64
}
fn default_projections() -> usize {
    64
}

impl RunConfig {
    /// Configured output directory, or `out`.
    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if cfg.model.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.model = dir.join(&cfg.model);
            }
        }
        Ok(cfg)
    }

    /// Steps per run for `solver` at `nfe`; rejects NFE the solver cannot hit.
    pub fn steps_for(&self, solver: Solver, nfe: usize) -> Result<usize> {
        let per = solver.evals_per_step();
        let total = nfe + usize::from(self.afs);
        if nfe == 0 || !total.is_multiple_of(per) {
            let hint = if per == 2 && !self.afs {
                " (two-evaluation solvers need even NFE unless AFS is on)"
            } else if per == 2 {
                " (with AFS, two-evaluation solvers need odd NFE)"
            } else {
                ""
            };
            return Err(Error::Config(format!(
                "NFE {nfe} is not reachable with {solver}{hint}"
            )));
        }
        Ok(total / per)
    }

    pub fn validate(&self) -> Result<()> {
        if self.solvers.is_empty() || self.nfe.is_empty() {
            return Err(Error::Config("need at least one solver and one NFE".into()));
        }
        for &solver in &self.solvers {
            solver.validate()?;
            for &nfe in &self.nfe {
                self.steps_for(solver, nfe)?;
            }
        }
        if self.oracle_nodes < 2 || self.oracle_substeps < 32 {
            return Err(Error::Config(
                "oracle needs >= 2 nodes and >= 32 substeps".into(),
            ));
        }
        if self.projections == 0 {
            return Err(Error::Config("need at least one projection".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub solver: String,
    pub afs: bool,
    pub nfe: usize,
    pub steps: usize,
    pub batch: usize,
    pub mean_endpoint_error: f64,
    pub sliced_wasserstein: f64,
    /// Model evaluations summed over the batch.
    pub eval_count: usize,
    /// Not persisted, so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverOrder {
    pub solver: String,
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub config: RunConfig,
    pub rows: Vec<MetricsRow>,
    pub orders: Vec<SolverOrder>,
}

const CSV_HEADER: [&str; 8] = [
    "solver",
    "afs",
    "nfe",
    "steps",
    "batch",
    "mean_endpoint_error",
    "sliced_wasserstein",
    "eval_count",
];

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.solver.clone(),
                r.afs.to_string(),
                r.nfe.to_string(),
                r.steps.to_string(),
                r.batch.to_string(),
                r.mean_endpoint_error.to_string(),
                r.sliced_wasserstein.to_string(),
                r.eval_count.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Load the model named in the config, run, and write the report files.
pub fn run_experiment(cfg: &RunConfig) -> Result<MetricsReport> {
    let model = GaussianMixture::load(&cfg.model)?;
    let report = run_with_model(&model, cfg)?;
    write_report(&report, &cfg.out_dir())?;
    Ok(report)
}

/// `metrics.csv` always; `report.json` only when there is something to report.
pub fn write_report(report: &MetricsReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("metrics.csv");
    std::fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    if !report.rows.is_empty() {
        let json_path = out_dir.join("report.json");
        std::fs::write(&json_path, report.to_json()).map_err(|e| Error::io(&json_path, e))?;
    }
    Ok(())
}

/// Sample every (solver, NFE) pair from shared priors and score the endpoints
/// against the oracle and against exact draws from the mixture.
pub fn run_with_model(model: &GaussianMixture, cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let mut report = MetricsReport {
        config: cfg.clone(),
        rows: Vec::new(),
        orders: Vec::new(),
    };
    if cfg.batch == 0 {
        return Ok(report);
    }
    let root = SeedTree::new(cfg.seed);
    let dim = model.dim();
    let priors = prior_batch(root.child(tags::NOISE), cfg.batch, dim, cfg.schedule.t_max);
    let data_seeds = root.child(tags::DATA);
    let data: Vec<DVector<f64>> = (0..cfg.batch)
        .map(|i| model.sample(&mut data_seeds.child(i as u64).rng()))
        .collect();
    let oracle_sched = cfg.schedule.build(cfg.oracle_nodes)?;
    let oracle: Vec<DVector<f64>> = priors
        .par_iter()
        .map(|x| {
            Ok(oracle_solve(model, x, &oracle_sched, cfg.oracle_substeps)?
                .endpoint()
                .clone())
        })
        .collect::<Result<_>>()?;
    let sw_seed: u64 = root.child(tags::PROJECTIONS).rng().random();

    for &solver in &cfg.solvers {
        let spec = SamplerSpec::new(solver).with_afs(cfg.afs);
        let mut points = Vec::new();
        for &nfe in &cfg.nfe {
            let started = Instant::now();
            let steps = cfg.steps_for(solver, nfe)?;
            let schedule = cfg.schedule.build(steps + 1)?;
            let runs = priors
                .par_iter()
                .map(|x| sample(model, spec, &schedule, x))
                .collect::<Result<Vec<_>>>()?;
            if let Some(bad) = runs.iter().find(|r| r.nfe != nfe) {
                return Err(Error::Contract(format!(
                    "{solver} reported {} evaluations, expected {nfe}",
                    bad.nfe
                )));
            }
            let endpoints: Vec<DVector<f64>> = runs.iter().map(|r| r.endpoint().clone()).collect();
            let err = endpoints
                .iter()
                .zip(&oracle)
                .map(|(a, b)| (a - b).norm())
                .sum::<f64>()
                / cfg.batch as f64;
            let sw = sliced_wasserstein(&endpoints, &data, cfg.projections, sw_seed)?;
            points.push((nfe, err));
            report.rows.push(MetricsRow {
                solver: solver.to_string(),
                afs: cfg.afs,
                nfe,
                steps,
                batch: cfg.batch,
                mean_endpoint_error: err,
                sliced_wasserstein: sw,
                eval_count: runs.iter().map(|r| r.nfe).sum(),
                wall_clock_secs: started.elapsed().as_secs_f64(),
            });
        }
        report.orders.push(SolverOrder {
            solver: solver.to_string(),
            order: order_estimate(&points).ok(),
        });
    }
    Ok(report)
}
