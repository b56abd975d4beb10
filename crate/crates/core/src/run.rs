//! Task execution for a [`RunConfig`]: validation, the six tasks, the
//! Monte Carlo versus oracle comparison and the run manifest.
//!
//! Tasks return their artifacts in memory; only [`write_artifacts`] touches
//! the file system. Artifact bytes depend on the config and the seed, never
//! on the worker count.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{posterior_from, stability_bound_check, ForwardModel, NoiseModel, PriorEnsemble, StabilityReport, TraceForward, UniformPrior};
use crate::config::{RunConfig, TaskSection, TraceBackend};
use crate::error::{Error, Result};
use crate::estimator::{boundary_continuity_probe, solution_field, write_field_csv, Estimate, FieldRow, FieldTable, McConfig};
use crate::fd::{solve_backward, FdSolution};
use crate::geometry::{axpy, distance, point, sub, Point, TimeVaryingDomain};
use crate::inverse::{cost_functional, minimize_cost, synthetic_data, write_log_jsonl, MinimizeOptions, ShapeModel, TraceSolver};
use crate::observation::{ObservationMatrix, ObservationSpec};
use crate::problem::{validate_assumptions, Problem, ValidationReport};
use crate::rng::derive_seed;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Samples drawn by the assumption check before any task runs.
const VALIDATION_SAMPLES: usize = 256;

/// Seed labels for the noise draws of the Bayesian task.
const NOISE_LABEL: u64 = 0x6e6f_6973_65;
const PAIR_LABEL: u64 = 0x7061_6972;

/// A named output file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    fn json<T: Serialize>(name: &str, value: &T) -> Result<Self> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        Ok(Self { name: name.into(), bytes })
    }
}

/// Problem and domain that passed validation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub problem: Problem,
    pub domain: TimeVaryingDomain,
    pub report: ValidationReport,
}

/// Builds and validates everything a task needs. Failures here are
/// configuration or assumption errors.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let problem = cfg.build_problem()?;
    let domain = cfg.build_domain()?;
    let report = validate_assumptions(&problem, &domain, VALIDATION_SAMPLES, cfg.solver.seed)?;
    check_task(cfg, domain.dim())?;
    Ok(Prepared { problem, domain, report })
}

fn check_task(cfg: &RunConfig, dim: usize) -> Result<()> {
    let check_points = |points: &[Vec<f64>]| {
        if points.is_empty() {
            return Err(Error::Config("task needs at least one point".into()));
        }
        match points.iter().find(|p| p.len() != dim + 1) {
            Some(p) => Err(Error::Config(format!("point {p:?} needs s and {dim} coordinates"))),
            None => Ok(()),
        }
    };
    if !(cfg.solver.dt > 0.0) {
        return Err(Error::Config("solver.dt must be positive".into()));
    }
    match &cfg.task {
        TaskSection::SolveMc { points } => check_points(points),
        TaskSection::SolveFd { points } | TaskSection::Compare { points, .. } => {
            check_points(points)?;
            cfg.solver.fd_grid().map(|_| ())
        }
        TaskSection::Probe { target, distances, .. } => {
            if target.len() != dim || distances.is_empty() {
                return Err(Error::Config(format!("probe needs a {dim}-dimensional target and distances")));
            }
            Ok(())
        }
        TaskSection::Invert { theta_true, data_path, backend, .. } => {
            if theta_true.is_some() == data_path.is_some() {
                return Err(Error::Config("invert needs exactly one of theta_true and data_path".into()));
            }
            if *backend == TraceBackend::Fd || theta_true.is_some() {
                cfg.solver.fd_grid()?;
            }
            Ok(())
        }
        TaskSection::Bayes { noise_variance, backend, .. } => {
            NoiseModel::new(*noise_variance)?;
            if *backend == TraceBackend::Fd {
                cfg.solver.fd_grid()?;
            }
            Ok(())
        }
    }
}

fn mc_config(cfg: &RunConfig, workers: usize) -> McConfig {
    McConfig::new(cfg.solver.sim(), cfg.solver.n_paths).with_workers(workers)
}

fn split_points(points: &[Vec<f64>]) -> Vec<(f64, Point)> {
    points.iter().map(|p| (p[0], point(&p[1..]))).collect()
}

/// Oracle values at the given points, in the Monte Carlo table layout.
pub fn fd_field(sol: &FdSolution, grid: &[(f64, Point)], dim: usize, seed: u64) -> FieldTable {
    let rows = grid
        .iter()
        .map(|(s, x)| FieldRow { s: *s, x: *x, estimate: Some(Estimate::exact(sol.value_at(*s, x), 0)) })
        .collect();
    FieldTable { dim, dt: sol.times.get(1).map_or(0.0, |t| t - sol.times[0]), seed, rows, warnings: Vec::new() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub s: f64,
    pub x: Vec<f64>,
    pub mc: f64,
    pub std_error: f64,
    pub fd: f64,
    pub gap: f64,
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub fd_tolerance: f64,
    pub rows: Vec<CompareRow>,
    pub max_abs_gap: f64,
    pub max_abs_fd: f64,
    /// Share of compared points with `|gap| ≤ 3·std_error + fd_tolerance`.
    pub fraction_within: f64,
    /// Points without a Monte Carlo estimate.
    pub skipped: usize,
}

/// Pointwise gaps between a Monte Carlo and an oracle table on one grid.
pub fn compare(mc: &FieldTable, fd: &FieldTable, fd_tolerance: f64) -> Result<CompareReport> {
    if mc.dim != fd.dim || mc.rows.len() != fd.rows.len() {
        return Err(Error::Shape("fields are on different grids".into()));
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (a, b) in mc.rows.iter().zip(&fd.rows) {
        if a.s != b.s || distance(&a.x, &b.x) != 0.0 {
            return Err(Error::Shape(format!("grid point ({}, {:?}) differs from ({}, {:?})", a.s, a.x, b.s, b.x)));
        }
        let (Some(e), Some(o)) = (&a.estimate, &b.estimate) else {
            skipped += 1;
            continue;
        };
        let gap = e.mean - o.mean;
        rows.push(CompareRow {
            s: a.s,
            x: a.x[..mc.dim].to_vec(),
            mc: e.mean,
            std_error: e.std_error,
            fd: o.mean,
            gap,
            within: gap.abs() <= 3.0 * e.std_error + fd_tolerance,
        });
    }
    let max_abs_gap = rows.iter().fold(0.0, |m: f64, r| m.max(r.gap.abs()));
    let max_abs_fd = rows.iter().fold(0.0, |m: f64, r| m.max(r.fd.abs()));
    let fraction_within =
        if rows.is_empty() { 1.0 } else { rows.iter().filter(|r| r.within).count() as f64 / rows.len() as f64 };
    Ok(CompareReport { fd_tolerance, rows, max_abs_gap, max_abs_fd, fraction_within, skipped })
}

fn field_csv(name: &str, table: &FieldTable) -> Result<Artifact> {
    let mut bytes = Vec::new();
    write_field_csv(&mut bytes, table)?;
    Ok(Artifact { name: name.into(), bytes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSummary {
    pub theta: Vec<f64>,
    pub value: f64,
    pub resolution: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_true: Option<Vec<f64>>,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesSummary {
    pub noise_variance: f64,
    pub n_samples: usize,
    pub c_f: f64,
    pub ess: f64,
    pub log_z: f64,
    pub posterior_mean: Vec<f64>,
    pub theta_true: Vec<f64>,
    pub warnings: Vec<String>,
    pub identical_pair: StabilityReport,
    pub pairs: Vec<StabilityReport>,
    pub pass_rate: f64,
}

fn trace_solver(cfg: &RunConfig, backend: TraceBackend, workers: usize) -> Result<TraceSolver> {
    Ok(match backend {
        TraceBackend::Fd => TraceSolver::Fd { grid: cfg.solver.fd_grid()? },
        TraceBackend::Mc => TraceSolver::Mc { config: mc_config(cfg, workers).with_crn(true) },
    })
}

fn gaussian_vector(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Runs the configured task and returns its artifacts.
pub fn execute(cfg: &RunConfig, prep: &Prepared, workers: usize) -> Result<Vec<Artifact>> {
    let Prepared { problem, domain, report } = prep;
    let dim = domain.dim();
    let seed = cfg.solver.seed;
    let mut out = vec![Artifact::json("validation.json", report)?];
    match &cfg.task {
        TaskSection::SolveMc { points } => {
            let table = solution_field(&split_points(points), problem, domain, &mc_config(cfg, workers))?;
            out.push(field_csv("field_mc.csv", &table)?);
        }
        TaskSection::SolveFd { points } => {
            let sol = solve_backward(problem, domain, &cfg.solver.fd_grid()?)?;
            out.push(field_csv("field_fd.csv", &fd_field(&sol, &split_points(points), dim, seed))?);
        }
        TaskSection::Compare { points, fd_tolerance } => {
            let grid = split_points(points);
            let sol = solve_backward(problem, domain, &cfg.solver.fd_grid()?)?;
            let fd = fd_field(&sol, &grid, dim, seed);
            let mc = solution_field(&grid, problem, domain, &mc_config(cfg, workers))?;
            out.push(field_csv("field_mc.csv", &mc)?);
            out.push(field_csv("field_fd.csv", &fd)?);
            out.push(Artifact::json("compare.json", &compare(&mc, &fd, *fd_tolerance)?)?);
        }
        TaskSection::Probe { s, target, distances, pi_collar } => {
            let target = point(target);
            let normal = match domain.cavity_at(*s) {
                Some((c, r)) if r > 0.0 && (distance(&target, &c) - r).abs() < 1e-9 => {
                    let d = sub(&target, &c);
                    d.map(|v| v / r)
                }
                _ => domain.base().inward_normal(&target),
            };
            let approach: Vec<Point> = distances.iter().map(|d| axpy(*d, &normal, &target)).collect();
            let rep = boundary_continuity_probe(*s, &target, &approach, *pi_collar, problem, domain, &mc_config(cfg, workers))?;
            out.push(Artifact::json("probe.json", &rep)?);
        }
        TaskSection::Invert { family, lower, upper, theta_true, data_path, data_grid, observation, backend, grid_points, budget } => {
            let model = ShapeModel::new(*family, domain.base().clone(), problem.horizon(), domain.margin(), lower.clone(), upper.clone())?;
            let spec = match observation {
                Some(s) => s.clone(),
                None => ObservationSpec::default_for(domain.base())?,
            };
            let d = match (theta_true, data_path) {
                (Some(th), _) => {
                    let grid = data_grid.unwrap_or(cfg.solver.fd_grid()?.refined(2));
                    synthetic_data(problem, &model, th, &spec, &grid)?.d
                }
                (None, Some(path)) => ObservationMatrix::read_csv(std::fs::File::open(path)?)?,
                (None, None) => return Err(Error::Config("invert needs data".into())),
            };
            let solver = trace_solver(cfg, *backend, 1)?;
            let f = |th: &[f64]| cost_functional(problem, &model, th, &d, &spec, &solver).map(|c| c.value);
            let opts = MinimizeOptions { grid_points: *grid_points, budget: *budget, workers };
            let res = minimize_cost(&f, lower, upper, &opts)?;
            let mut data = Vec::new();
            d.write_csv(&mut data)?;
            out.push(Artifact { name: "data.csv".into(), bytes: data });
            let mut log = Vec::new();
            write_log_jsonl(&mut log, &res.log)?;
            out.push(Artifact { name: "evaluations.jsonl".into(), bytes: log });
            let summary = InversionSummary {
                theta: res.theta,
                value: res.value,
                resolution: res.resolution,
                theta_true: theta_true.clone(),
                evaluations: res.log.len(),
            };
            out.push(Artifact::json("inversion.json", &summary)?);
        }
        TaskSection::Bayes { family, lower, upper, theta_true, noise_variance, n_samples, design, backend, n_pairs, perturbation } => {
            let model = ShapeModel::new(*family, domain.base().clone(), problem.horizon(), domain.margin(), lower.clone(), upper.clone())?;
            let design = match design {
                Some(d) => d.clone(),
                None => TraceForward::default_design(&ObservationSpec::default_for(domain.base())?),
            };
            let forward = TraceForward { problem: problem.clone(), model: model.clone(), design, solver: trace_solver(cfg, *backend, 1)? };
            let noise = NoiseModel::new(*noise_variance)?;
            let sd = noise.std_dev();
            let clean = forward.forward(theta_true)?;
            let m = clean.len();
            let noisy = |label: u64, base: &[f64], scale: f64| -> Vec<f64> {
                base.iter().zip(gaussian_vector(derive_seed(seed, label), m)).map(|(b, e)| b + scale * e).collect()
            };
            let y = noisy(NOISE_LABEL, &clean, sd);
            let ens = PriorEnsemble::draw(&forward, &UniformPrior::from_model(&model), *n_samples, seed, workers)?;
            let c_f = ens.c_f();
            let post = posterior_from(&ens, &y, &noise)?;
            let mut csv = Vec::new();
            post.write_csv(&mut csv)?;
            out.push(Artifact { name: "posterior.csv".into(), bytes: csv });
            let identical_pair = stability_bound_check(&y, &y, &noise, &ens, c_f)?;
            let pairs = (0..*n_pairs as u64)
                .map(|k| {
                    let yk = noisy(derive_seed(NOISE_LABEL, k), &clean, sd);
                    let yk2 = noisy(derive_seed(PAIR_LABEL, k), &yk, perturbation * sd);
                    stability_bound_check(&yk, &yk2, &noise, &ens, c_f)
                })
                .collect::<Result<Vec<_>>>()?;
            let pass_rate =
                if pairs.is_empty() { 1.0 } else { pairs.iter().filter(|r| r.pass).count() as f64 / pairs.len() as f64 };
            let summary = BayesSummary {
                noise_variance: *noise_variance,
                n_samples: *n_samples,
                c_f,
                ess: post.ess,
                log_z: post.log_z,
                posterior_mean: post.mean(),
                theta_true: theta_true.clone(),
                warnings: post.warnings.clone(),
                identical_pair,
                pairs,
                pass_rate,
            };
            out.push(Artifact::json("stability.json", &summary)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub workers: usize,
    pub versions: Vec<(String, String)>,
    pub wall_time_s: f64,
    pub artifacts: Vec<String>,
}

/// SHA-256 of the canonical JSON form of the config.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let digest = Sha256::digest(cfg.canonical_json()?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes every artifact and then `manifest.json` into `dir`.
pub fn write_artifacts(dir: &Path, artifacts: &[Artifact], manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for a in artifacts {
        std::fs::write(dir.join(&a.name), &a.bytes)?;
    }
    let m = Artifact::json("manifest.json", manifest)?;
    std::fs::write(dir.join(m.name), m.bytes)?;
    Ok(())
}
