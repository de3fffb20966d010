use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use amed_core::amed::{amed_sample, train, AmedKind, PredictorParams, TrainConfig};
use amed_core::geometry::{
    cumulative_variance, grid_align, mc_shell_check, parse_grid, projection_error, BoundParams,
};
use amed_core::harness::{
    read_trajectory_csv, run_experiment, write_schedule_csv, write_trajectory_csv, RunConfig,
};
use amed_core::rng::{prior_batch, tags, SeedTree};
use amed_core::{
    make_schedule, oracle_solve, sample, GaussianMixture, SamplerSpec, ScheduleKind, ScoreModel,
    Solver, TimeSchedule,
};

/// Only the default output directory is read from the environment.
const OUT_DIR_ENV: &str = "AMED_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "amed",
    version,
    about = "Fast PF-ODE samplers on Gaussian-mixture score models"
)]
struct Cli {
    /// TOML file of defaults. For `eval` it is the run config; for other
    /// commands each key stands for the flag of the same name.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample trajectories with a fixed solver or a trained predictor.
    Sample(SampleArgs),
    /// Distil a step predictor from a teacher solver.
    #[command(name = "train-amed")]
    TrainAmed(TrainArgs),
    /// Projection error of trajectories onto their leading principal components.
    Pca(PcaArgs),
    /// Greedy search of the intermediate-time ratio against the oracle.
    Align(AlignArgs),
    /// Monte Carlo check of the shell radius for the logistic bound.
    #[command(name = "bound-check")]
    BoundCheck(BoundArgs),
    /// Batch comparison of solvers across NFE budgets.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ScheduleArgs {
    /// `kind[,N[,rho]]` with kind polynomial, logsnr or uniform; N counts nodes.
    #[arg(long, default_value = "polynomial")]
    schedule: String,
    #[arg(long, default_value_t = 0.002)]
    t_min: f64,
    #[arg(long, default_value_t = 80.0)]
    t_max: f64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Solver, or `amed` / a plugin base when `--predictor` is given.
    #[arg(long, default_value = "dpm2")]
    solver: String,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Target evaluations; fixes N when the schedule leaves it out.
    #[arg(long)]
    nfe: Option<usize>,
    #[arg(long)]
    afs: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectories to draw; above one, `--out` names a directory.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Trained checkpoint from `train-amed`.
    #[arg(long)]
    predictor: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the time grid as a one-column CSV.
    #[arg(long)]
    schedule_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    /// `amed`, or a base solver (optionally `plugin:<base>`) for the plugin.
    #[arg(long, default_value = "amed")]
    student: String,
    /// Defaults to the student's base (dpm2 for `amed`).
    #[arg(long)]
    teacher: Option<String>,
    /// Schedule nodes; overrides N in `--schedule`.
    #[arg(long = "N", alias = "n")]
    nodes: Option<usize>,
    /// Extra teacher steps per interval.
    #[arg(long = "M", alias = "m")]
    m: Option<usize>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = 10_000)]
    images: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    afs: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-(loop, step) losses as CSV.
    #[arg(long)]
    losses: Option<PathBuf>,
}

#[derive(Args)]
struct PcaArgs {
    /// Single trajectory CSV.
    #[arg(long = "in", required_unless_present = "batch")]
    input: Option<PathBuf>,
    /// Directory of trajectory CSVs, processed in name order.
    #[arg(long)]
    batch: Option<PathBuf>,
    /// Largest subspace dimension reported.
    #[arg(long, default_value_t = 3)]
    max_k: usize,
    /// Per-step projection errors; `-` for stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cumulative explained variance per component.
    #[arg(long)]
    variance_out: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "dpm2")]
    solver: String,
    /// `lo:hi:step`.
    #[arg(long, default_value = "0.1:1.0:0.1")]
    grid: String,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    nfe: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    oracle_substeps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    d: usize,
    #[arg(long)]
    s: f64,
    #[arg(long)]
    t: f64,
    #[arg(long, default_value_t = 4096)]
    trials: usize,
    /// Logistic amplitude; defaults to sqrt(3d)/15.
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long, default_value_t = 200)]
    substeps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Overrides the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> Result<()> {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = parse(argv)?;
    match cli.command {
        Command::Sample(a) => cmd_sample(a),
        Command::TrainAmed(a) => cmd_train(a),
        Command::Pca(a) => cmd_pca(a),
        Command::Align(a) => cmd_align(a),
        Command::BoundCheck(a) => cmd_bound(a),
        Command::Eval(a) => cmd_eval(a, cli.config),
    }
}

fn command() -> clap::Command {
    Cli::command().args_override_self(true)
}

/// Config keys become flags placed right after the subcommand, so explicit
/// flags later on the line win. `eval` reads its config as a run config.
fn parse(argv: Vec<OsString>) -> Result<Cli> {
    let Some((config, sub)) = scan_config(&argv) else {
        return Ok(Cli::from_arg_matches(&command().get_matches_from(&argv))?);
    };
    if argv[sub] == "eval" {
        return Ok(Cli::from_arg_matches(&command().get_matches_from(&argv))?);
    }
    let mut merged = argv[..=sub].to_vec();
    merged.extend(config_flags(&config)?);
    merged.extend_from_slice(&argv[sub + 1..]);
    Ok(Cli::from_arg_matches(&command().get_matches_from(&merged))?)
}

/// Config path and the index of the subcommand token, if both are present.
fn scan_config(argv: &[OsString]) -> Option<(PathBuf, usize)> {
    let names: Vec<String> = command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy();
        if arg == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if let Some(v) = arg.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if sub.is_none() && names.iter().any(|n| *n == arg) {
            sub = Some(i);
        }
        i += 1;
    }
    Some((config?, sub?))
}

fn config_flags(path: &Path) -> Result<Vec<OsString>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .with_context(|| format!("parsing {}", path.display()))?;
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            toml::Value::Boolean(true) => out.push(flag.into()),
            toml::Value::Boolean(false) => {}
            toml::Value::String(s) => out.extend([flag.into(), s.into()]),
            toml::Value::Integer(i) => out.extend([flag.into(), i.to_string().into()]),
            toml::Value::Float(f) => out.extend([flag.into(), f.to_string().into()]),
            other => bail!("config key {key}: unsupported value {other}"),
        }
    }
    Ok(out)
}

fn default_out(name: &str) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_default()
        .join(name)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_rows<T: Serialize>(out: Option<PathBuf>, default_name: &str, rows: &[T]) -> Result<()> {
    let path = out.unwrap_or_else(|| default_out(default_name));
    let mut w: csv::Writer<Box<dyn std::io::Write>> = if path.as_os_str() == "-" {
        csv::Writer::from_writer(Box::new(std::io::stdout().lock()))
    } else {
        create_parent(&path)?;
        let file =
            std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        csv::Writer::from_writer(Box::new(file))
    };
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    if path.as_os_str() != "-" {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

struct ScheduleChoice {
    kind: ScheduleKind,
    nodes: Option<usize>,
}

fn parse_schedule(spec: &str) -> Result<ScheduleChoice> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let nodes = match parts.get(1) {
        Some(n) if !n.is_empty() => Some(
            n.parse()
                .with_context(|| format!("bad node count in '{spec}'"))?,
        ),
        _ => None,
    };
    let rho = parts
        .get(2)
        .map(|r| {
            r.parse::<f64>()
                .with_context(|| format!("bad rho in '{spec}'"))
        })
        .transpose()?;
    let kind = match parts[0].to_ascii_lowercase().as_str() {
        "polynomial" | "poly" | "edm" => ScheduleKind::Polynomial {
            rho: rho.unwrap_or(7.0),
        },
        "logsnr" | "log_snr" if rho.is_none() => ScheduleKind::LogSnr,
        "uniform" if rho.is_none() => ScheduleKind::Uniform,
        "logsnr" | "log_snr" | "uniform" => bail!("only polynomial schedules take rho: '{spec}'"),
        other => bail!("unknown schedule kind '{other}'"),
    };
    if parts.len() > 3 {
        bail!("schedule spec has too many fields: '{spec}'");
    }
    Ok(ScheduleChoice { kind, nodes })
}

/// Smallest node count whose evaluation count equals `nfe`.
fn nodes_for(nfe: usize, cost: impl Fn(usize) -> usize) -> Result<usize> {
    if let Some(n) = (2..=nfe + 2).find(|&n| cost(n) == nfe) {
        return Ok(n);
    }
    let below = (2..=nfe + 2).map(&cost).filter(|&c| c < nfe).max();
    let above = (2..=nfe + 3).map(&cost).find(|&c| c > nfe);
    let near: Vec<String> = below
        .into_iter()
        .chain(above)
        .map(|c| c.to_string())
        .collect();
    bail!(
        "NFE {nfe} is not reachable with this solver and AFS setting; nearest: {}",
        near.join(", ")
    )
}

fn build_schedule(
    args: &ScheduleArgs,
    nodes: Option<usize>,
    nfe: Option<usize>,
    cost: impl Fn(usize) -> usize,
) -> Result<TimeSchedule> {
    let choice = parse_schedule(&args.schedule)?;
    let n = match (nodes.or(choice.nodes), nfe) {
        (Some(n), Some(nfe)) if cost(n) != nfe => {
            bail!("{n} nodes give NFE {}, not {nfe}", cost(n))
        }
        (Some(n), _) => n,
        (None, Some(nfe)) => nodes_for(nfe, &cost)?,
        (None, None) => bail!("give the node count in --schedule or an --nfe target"),
    };
    Ok(make_schedule(choice.kind, n, args.t_min, args.t_max)?)
}

fn student_kind(spec: &str) -> Result<AmedKind> {
    let spec = spec.trim();
    if spec.eq_ignore_ascii_case("amed") {
        return Ok(AmedKind::MeanDirection);
    }
    let base = spec.strip_prefix("plugin:").unwrap_or(spec);
    Ok(AmedKind::Plugin {
        base: base.parse()?,
    })
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let model = GaussianMixture::load(&a.model)?;
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    let learned = match &a.predictor {
        Some(path) => Some((PredictorParams::load(path)?, student_kind(&a.solver)?)),
        None => None,
    };
    let schedule = match &learned {
        Some((_, kind)) => build_schedule(&a.schedule, None, a.nfe, |n| kind.nfe(n, a.afs))?,
        None => {
            let spec = SamplerSpec::new(a.solver.parse::<Solver>()?).with_afs(a.afs);
            build_schedule(&a.schedule, None, a.nfe, |n| spec.nfe(n))?
        }
    };
    if let Some(path) = &a.schedule_out {
        create_parent(path)?;
        write_schedule_csv(path, &schedule)?;
    }
    let priors = prior_batch(
        SeedTree::new(a.seed).child(tags::NOISE),
        a.count,
        model.dim(),
        schedule.t_max(),
    );
    let runs = priors
        .par_iter()
        .map(|x| match &learned {
            Some((params, kind)) => amed_sample(&model, params, *kind, &schedule, x, a.afs),
            None => {
                let spec = SamplerSpec::new(a.solver.parse::<Solver>()?).with_afs(a.afs);
                sample(&model, spec, &schedule, x)
            }
        })
        .collect::<amed_core::Result<Vec<_>>>()?;

    let out = a.out.unwrap_or_else(|| {
        default_out(if a.count == 1 {
            "traj.csv"
        } else {
            "trajectories"
        })
    });
    if a.count == 1 {
        create_parent(&out)?;
        write_trajectory_csv(&out, &runs[0])?;
    } else {
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        for (i, run) in runs.iter().enumerate() {
            write_trajectory_csv(out.join(format!("traj_{i:04}.csv")), run)?;
        }
    }
    eprintln!(
        "{} trajectories, {} nodes, NFE {} each -> {}",
        runs.len(),
        schedule.len(),
        runs[0].nfe,
        out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let model = GaussianMixture::load(&a.model)?;
    let student = student_kind(&a.student)?;
    let mut cfg = TrainConfig::recipe(student);
    if let Some(t) = &a.teacher {
        cfg.teacher = SamplerSpec::new(t.parse()?);
    }
    if let Some(m) = a.m {
        cfg.m = m;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.images = a.images;
    cfg.batch = a.batch;
    cfg.seed = a.seed;
    cfg.afs = a.afs;
    let schedule = build_schedule(&a.schedule, a.nodes, None, |n| student.nfe(n, a.afs))?;
    let report = train(&model, &cfg, &schedule)?;

    let out = a.out.unwrap_or_else(|| default_out("predictor.json"));
    create_parent(&out)?;
    report.params.save(&out)?;
    if let Some(path) = a.losses {
        write_rows(Some(path), "losses.csv", &report.losses)?;
    }
    let last_loop = report.losses.last().map_or(0, |r| r.loop_index);
    let tail: Vec<f64> = report
        .losses
        .iter()
        .filter(|r| r.loop_index == last_loop)
        .map(|r| r.loss)
        .collect();
    eprintln!(
        "{} updates over {} loops, final loop mean loss {:.6}, NFE {} -> {}",
        report.updates,
        cfg.loops(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        student.nfe(schedule.len(), a.afs),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PcaRow {
    trajectory: String,
    step: usize,
    t: f64,
    k: usize,
    projection_error: Option<f64>,
}

#[derive(Serialize)]
struct VarianceRow {
    trajectory: String,
    component: usize,
    cumulative_variance: f64,
}

fn trajectory_files(a: &PcaArgs) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    if let Some(p) = &a.input {
        files.push(p.clone());
    }
    if let Some(dir) = &a.batch {
        let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        found.retain(|p| p.extension().is_some_and(|e| e == "csv"));
        found.sort();
        if found.is_empty() {
            bail!("no CSV files in {}", dir.display());
        }
        files.extend(found);
    }
    Ok(files)
}

fn cmd_pca(a: PcaArgs) -> Result<()> {
    if a.max_k == 0 {
        bail!("--max-k must be at least 1");
    }
    let mut rows = Vec::new();
    let mut variance = Vec::new();
    for path in trajectory_files(&a)? {
        let traj = read_trajectory_csv(&path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for k in 1..=a.max_k.min(traj.dim()) {
            let errors = projection_error(&traj, k)?;
            for (step, ((t, _), e)) in traj.nodes.iter().zip(errors).enumerate() {
                rows.push(PcaRow {
                    trajectory: name.clone(),
                    step,
                    t: *t,
                    k,
                    projection_error: e,
                });
            }
        }
        for (i, v) in cumulative_variance(&traj)?.into_iter().enumerate() {
            variance.push(VarianceRow {
                trajectory: name.clone(),
                component: i + 1,
                cumulative_variance: v,
            });
        }
    }
    write_rows(a.out, "pca.csv", &rows)?;
    if let Some(path) = a.variance_out {
        write_rows(Some(path), "pca_variance.csv", &variance)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AlignOut {
    trajectory: usize,
    step: usize,
    t_hi: f64,
    t_lo: f64,
    best_r: f64,
    baseline_error: f64,
    searched_error: f64,
    alignment: f64,
}

fn cmd_align(a: AlignArgs) -> Result<()> {
    let model = GaussianMixture::load(&a.model)?;
    let base: Solver = a.solver.parse()?;
    let grid = parse_grid(&a.grid)?;
    let spec = SamplerSpec::new(base);
    let schedule = build_schedule(&a.schedule, None, a.nfe, |n| spec.nfe(n))?;
    let priors = prior_batch(
        SeedTree::new(a.seed).child(tags::NOISE),
        a.count,
        model.dim(),
        schedule.t_max(),
    );
    let tables = priors
        .par_iter()
        .map(|x| {
            let oracle = oracle_solve(&model, x, &schedule, a.oracle_substeps)?;
            grid_align(&model, base, &schedule, &grid, &oracle)
        })
        .collect::<amed_core::Result<Vec<_>>>()?;
    let rows: Vec<AlignOut> = tables
        .iter()
        .enumerate()
        .flat_map(|(i, table)| {
            table.rows.iter().map(move |r| AlignOut {
                trajectory: i,
                step: r.step,
                t_hi: r.t_hi,
                t_lo: r.t_lo,
                best_r: r.best_r,
                baseline_error: r.baseline_error,
                searched_error: r.searched_error,
                alignment: r.alignment,
            })
        })
        .collect();
    let mean = tables.iter().map(|t| t.mean_alignment()).sum::<f64>() / tables.len().max(1) as f64;
    write_rows(a.out, "align.csv", &rows)?;
    eprintln!(
        "mean alignment {mean:.6e} over {} trajectories",
        tables.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct ShellOut {
    d: usize,
    a: f64,
    b: f64,
    s: f64,
    t: f64,
    radius: f64,
    mean_norm: f64,
    rel_std: f64,
    relative_gap: f64,
    trials: usize,
    substeps: usize,
}

fn cmd_bound(a: BoundArgs) -> Result<()> {
    let std_params = BoundParams::standard(a.d)?;
    let p = BoundParams::new(
        a.a.unwrap_or(std_params.a),
        a.b.unwrap_or(std_params.b),
        a.d,
    )?;
    let r = mc_shell_check(&p, a.s, a.t, a.trials, a.substeps, a.seed)?;
    let row = ShellOut {
        d: a.d,
        a: p.a,
        b: p.b,
        s: a.s,
        t: a.t,
        radius: r.radius,
        mean_norm: r.mean_norm,
        rel_std: r.rel_std,
        relative_gap: (r.mean_norm - r.radius).abs() / r.radius,
        trials: r.trials,
        substeps: r.substeps,
    };
    write_rows(a.out, "bound_check.csv", &[row])
}

fn cmd_eval(a: EvalArgs, config: Option<PathBuf>) -> Result<()> {
    let path = config.ok_or_else(|| anyhow!("eval needs --config <run.toml>"))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(dir) = a.out_dir {
        cfg.out_dir = Some(dir);
    } else if cfg.out_dir.is_none() {
        cfg.out_dir = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    }
    let report = run_experiment(&cfg)?;
    print!("{}", report.to_csv());
    for o in &report.orders {
        match o.order {
            Some(order) => eprintln!("{}: empirical order {order:.3}", o.solver),
            None => eprintln!("{}: order needs at least three NFE values", o.solver),
        }
    }
    eprintln!("wrote {}", cfg.out_dir().display());
    Ok(())
}
