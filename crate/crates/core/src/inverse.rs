//! Shape identification: the boundary misfit `V(D) = ∫₀ᵀ∫_{Γ^ω} |u^D − d|² dS dt`,
//! its continuity under Hausdorff convergence of the Dirichlet part, a
//! local-time driven variant and a derivative-free minimizer.

use std::f64::consts::TAU;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{mean_and_se, par_map, path_samples, Estimate, McConfig};
use crate::fd::{solve_backward, trace_on_observation, FdGrid};
use crate::geometry::{hausdorff_distance, BoundaryClass, Cavity, FixedDomain, HausdorffSampling, Keyframe, Point, Shape, TimeVaryingDomain};
use crate::observation::{ObservationMatrix, ObservationSpec};
use crate::problem::Problem;
use crate::sde::{Observer, PathState, Simulator, StepEvent};

/// How θ parametrizes the cavity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// θ = (centre, radius), fixed in time.
    StaticBall,
    /// θ = (centre at 0, centre at T, radius), moving linearly.
    Translating,
    /// θ = (radius) about a fixed centre.
    RadiusAt { center: [f64; 3] },
}

/// Admissible class: a family over a base domain, restricted to a box.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    pub family: ShapeFamily,
    pub base: FixedDomain,
    pub horizon: f64,
    /// Minimal distance from the cavity to Γ.
    pub margin: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// An admissible θ and the domain it describes.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainParam {
    pub theta: Vec<f64>,
    pub domain: TimeVaryingDomain,
}

impl ShapeModel {
    pub fn new(family: ShapeFamily, base: FixedDomain, horizon: f64, margin: f64, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let model = Self { family, base, horizon, margin, lower, upper };
        let n = model.n_params();
        if model.lower.len() != n || model.upper.len() != n {
            return Err(Error::Config(format!("shape box needs {n} components")));
        }
        if model.lower.iter().zip(&model.upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::Config("shape box has lower > upper".into()));
        }
        if !(model.lower[n - 1] > 0.0) {
            return Err(Error::Config("radius lower bound must be positive".into()));
        }
        Ok(model)
    }

    pub fn n_params(&self) -> usize {
        let d = self.base.dim();
        match self.family {
            ShapeFamily::StaticBall => d + 1,
            ShapeFamily::Translating => 2 * d + 1,
            ShapeFamily::RadiusAt { .. } => 1,
        }
    }

    pub fn box_center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    /// Checks admissibility and builds the domain.
    pub fn param(&self, theta: &[f64]) -> Result<DomainParam> {
        let n = self.n_params();
        if theta.len() != n {
            return Err(Error::Shape(format!("θ has {} components, expected {n}", theta.len())));
        }
        for (k, v) in theta.iter().enumerate() {
            let slack = 1e-12 * (1.0 + v.abs());
            if !(v.is_finite() && *v >= self.lower[k] - slack && *v <= self.upper[k] + slack) {
                return Err(Error::Domain(format!("θ[{k}] = {v} is outside [{}, {}]", self.lower[k], self.upper[k])));
            }
        }
        let d = self.base.dim();
        let r = theta[n - 1];
        let at = |c: &[f64]| {
            let mut p = [0.0; 3];
            p[..d].copy_from_slice(c);
            p
        };
        let keyframes = match self.family {
            ShapeFamily::StaticBall => vec![Keyframe { t: 0.0, center: at(&theta[..d]), radius: r }],
            ShapeFamily::Translating => vec![
                Keyframe { t: 0.0, center: at(&theta[..d]), radius: r },
                Keyframe { t: self.horizon, center: at(&theta[d..2 * d]), radius: r },
            ],
            ShapeFamily::RadiusAt { center } => vec![Keyframe { t: 0.0, center, radius: r }],
        };
        let domain = TimeVaryingDomain::new(self.base.clone(), Some(Cavity::new(keyframes)?), self.horizon, self.margin)?;
        Ok(DomainParam { theta: theta.to_vec(), domain })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { theta: Vec<f64>, grid: FdGrid },
    External { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationData {
    pub d: ObservationMatrix,
    pub provenance: Provenance,
}

/// Noiseless data from the oracle at `theta`.
pub fn synthetic_data(problem: &Problem, model: &ShapeModel, theta: &[f64], spec: &ObservationSpec, grid: &FdGrid) -> Result<ObservationData> {
    let p = model.param(theta)?;
    let sol = solve_backward(problem, &p.domain, grid)?;
    let d = trace_on_observation(&sol, &p.domain, spec)?;
    Ok(ObservationData { d, provenance: Provenance::Synthetic { theta: theta.to_vec(), grid: *grid } })
}

/// Source of the model trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceSolver {
    Fd { grid: FdGrid },
    Mc { config: McConfig },
}

/// Model trace with per-entry standard errors (zero for the oracle) and,
/// on request, the per-path samples of each entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTrace {
    pub values: ObservationMatrix,
    pub std_errors: Vec<f64>,
    pub samples: Option<Vec<Vec<f64>>>,
}

/// Trace of `u^D` on the window. The Monte Carlo version evaluates the
/// stochastic solution at boundary points directly.
pub fn model_trace(
    problem: &Problem,
    domain: &TimeVaryingDomain,
    spec: &ObservationSpec,
    solver: &TraceSolver,
    keep_samples: bool,
) -> Result<ModelTrace> {
    match solver {
        TraceSolver::Fd { grid } => {
            let sol = solve_backward(problem, domain, grid)?;
            let values = trace_on_observation(&sol, domain, spec)?;
            let n = values.values.len();
            Ok(ModelTrace { values, std_errors: vec![0.0; n], samples: None })
        }
        TraceSolver::Mc { config } => {
            let points = spec.points(domain)?;
            let times = spec.times(domain.horizon());
            let np = points.len();
            let mut means = Vec::with_capacity(times.len() * np);
            let mut ses = Vec::with_capacity(times.len() * np);
            let mut all = keep_samples.then(Vec::new);
            for (i, &t) in times.iter().enumerate() {
                for (j, p) in points.iter().enumerate() {
                    let s = path_samples(t, p, problem, domain, config, (i * np + j) as u64)?;
                    let (m, se) = mean_and_se(&s);
                    means.push(m);
                    ses.push(se);
                    if let Some(a) = all.as_mut() {
                        a.push(s);
                    }
                }
            }
            let values = ObservationMatrix::new(times, spec.params(), means)?;
            Ok(ModelTrace { values, std_errors: ses, samples: all })
        }
    }
}

/// Misfit with a delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostValue {
    pub value: f64,
    pub std_error: f64,
}

fn quadrature_weights(spec: &ObservationSpec, base: &FixedDomain, horizon: f64) -> Vec<f64> {
    let wt = spec.time_weights(horizon);
    let wp = spec.point_weights(base);
    wt.iter().flat_map(|a| wp.iter().map(move |b| a * b)).collect()
}

/// Trapezoid in time, arc-length weights on the window.
pub fn cost_from_trace(trace: &ModelTrace, d: &ObservationMatrix, spec: &ObservationSpec, base: &FixedDomain, horizon: f64) -> Result<CostValue> {
    if !trace.values.same_layout(d) {
        return Err(Error::Shape("data and model trace have different layouts".into()));
    }
    let w = quadrature_weights(spec, base, horizon);
    if w.len() != d.values.len() {
        return Err(Error::Shape("observation spec does not match the data".into()));
    }
    let mut value = 0.0;
    let mut var = 0.0;
    for k in 0..w.len() {
        let r = trace.values.values[k] - d.values[k];
        value += w[k] * r * r;
        var += (2.0 * w[k] * r * trace.std_errors[k]).powi(2);
    }
    Ok(CostValue { value, std_error: var.sqrt() })
}

/// `V(D(θ))` for data `d`.
pub fn cost_functional(
    problem: &Problem,
    model: &ShapeModel,
    theta: &[f64],
    d: &ObservationMatrix,
    spec: &ObservationSpec,
    solver: &TraceSolver,
) -> Result<CostValue> {
    let p = model.param(theta)?;
    let trace = model_trace(problem, &p.domain, spec, solver, false)?;
    cost_from_trace(&trace, d, spec, &model.base, model.horizon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityRow {
    pub theta: Vec<f64>,
    pub hausdorff: f64,
    pub value: f64,
    pub gap: f64,
    /// 3 propagated standard errors of `V_m` (Monte Carlo) or `1e-3·V` (oracle).
    pub noise_floor: f64,
    /// 3 standard errors of the gap from paired per-path samples; tighter
    /// than `noise_floor` under common random numbers.
    pub paired_floor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub limit_value: CostValue,
    pub rows: Vec<ContinuityRow>,
}

/// Pairs `d_𝓗(Σ̄_m, Σ̄)` with `|V(θ_m) − V(θ)|`. Monte Carlo runs share
/// path seeds across the sequence, and gap errors come from paired samples.
#[allow(clippy::too_many_arguments)]
pub fn continuity_experiment(
    problem: &Problem,
    model: &ShapeModel,
    sequence: &[Vec<f64>],
    theta: &[f64],
    d: &ObservationMatrix,
    spec: &ObservationSpec,
    solver: &TraceSolver,
    sampling: &HausdorffSampling,
) -> Result<ContinuityReport> {
    let limit = model.param(theta)?;
    let keep = matches!(solver, TraceSolver::Mc { .. });
    let base_trace = model_trace(problem, &limit.domain, spec, solver, keep)?;
    let limit_value = cost_from_trace(&base_trace, d, spec, &model.base, model.horizon)?;
    let w = quadrature_weights(spec, &model.base, model.horizon);
    let mut rows = Vec::with_capacity(sequence.len());
    for th in sequence {
        let p = model.param(th)?;
        let hd = hausdorff_distance(&p.domain, &limit.domain, sampling)?;
        let trace = model_trace(problem, &p.domain, spec, solver, keep)?;
        let v = cost_from_trace(&trace, d, spec, &model.base, model.horizon)?;
        let gap = (v.value - limit_value.value).abs();
        let paired_floor = match (&trace.samples, &base_trace.samples) {
            (Some(sm), Some(s0)) => {
                let mut var = 0.0;
                for k in 0..w.len() {
                    let rm = 2.0 * (trace.values.values[k] - d.values[k]);
                    let r0 = 2.0 * (base_trace.values.values[k] - d.values[k]);
                    let paired: Vec<f64> = sm[k].iter().zip(&s0[k]).map(|(a, b)| rm * a - r0 * b).collect();
                    let (_, se) = mean_and_se(&paired);
                    var += (w[k] * se).powi(2);
                }
                Some(3.0 * var.sqrt())
            }
            _ => None,
        };
        let noise_floor = if keep { 3.0 * v.std_error } else { 1e-3 * limit_value.value };
        rows.push(ContinuityRow { theta: th.clone(), hausdorff: hd, value: v.value, gap, noise_floor, paired_floor });
    }
    Ok(ContinuityReport { limit_value, rows })
}

/// Whether a boundary point lies in the window.
fn in_window(domain: &TimeVaryingDomain, spec: &ObservationSpec, xb: &Point) -> bool {
    let param = domain.base().boundary_param(xb);
    match domain.base().shape() {
        Shape::Disk { .. } => (param - spec.arc[0]).rem_euclid(TAU) <= spec.arc[1] - spec.arc[0] + 1e-12,
        _ => (param - spec.arc[0]).abs() < 1e-12,
    }
}

struct WindowCost<'a> {
    domain: &'a TimeVaryingDomain,
    spec: &'a ObservationSpec,
    gamma_exp: f64,
    residual: &'a (dyn Fn(f64, &Point, f64) -> f64 + Sync),
    total: f64,
}

impl Observer for WindowCost<'_> {
    fn on_step(&mut self, _before: &PathState, after: &PathState, event: &StepEvent) {
        if let StepEvent::Reflection { xb, dl, class: BoundaryClass::Robin } = event {
            if in_window(self.domain, self.spec, xb) {
                let t = after.t;
                let param = self.domain.base().boundary_param(xb);
                let r = (self.residual)(t, xb, param);
                self.total += t.powf(self.gamma_exp) * r * r * dl;
            }
        }
    }
}

/// `E[∫ t^γ 1_{Γ^ω}(X) |u − d|²(t, X) dL]` over paths started at time 0
/// from the window nodes in turn, accumulated until the Dirichlet stop.
#[allow(clippy::too_many_arguments)]
pub fn probabilistic_cost(
    gamma_exp: f64,
    u: &(dyn Fn(f64, &Point) -> f64 + Sync),
    d: &ObservationMatrix,
    spec: &ObservationSpec,
    problem: &Problem,
    domain: &TimeVaryingDomain,
    cfg: &McConfig,
) -> Result<Estimate> {
    if !(gamma_exp >= 0.0) {
        return Err(Error::Config("time exponent must be nonnegative".into()));
    }
    let residual = |t: f64, x: &Point, param: f64| u(t, x) - d.interpolate(t, param);
    window_local_time(gamma_exp, &residual, spec, problem, domain, cfg)
}

/// Local-time integral of `t^γ·r²` over window visits; `residual` gets the
/// time, the boundary point and its arc parameter.
pub fn window_local_time(
    gamma_exp: f64,
    residual: &(dyn Fn(f64, &Point, f64) -> f64 + Sync),
    spec: &ObservationSpec,
    problem: &Problem,
    domain: &TimeVaryingDomain,
    cfg: &McConfig,
) -> Result<Estimate> {
    let starts = spec.points(domain)?;
    let sim = Simulator::new(problem, domain, cfg.sim)?;
    let vals = par_map(cfg.n_paths, cfg.workers, |k| {
        let mut obs = WindowCost { domain, spec, gamma_exp, residual, total: 0.0 };
        let x0 = starts[k % starts.len()];
        sim.simulate_path_observed(0.0, &x0, 0, k as u64, &mut obs)?;
        Ok(obs.total)
    })?;
    Ok(Estimate::from_samples(&vals))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Grid,
    Refine,
    NelderMead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub index: usize,
    pub phase: Phase,
    pub theta: Vec<f64>,
    /// `None` when θ was rejected.
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimizeOptions {
    /// Grid points per coordinate in each grid round (at least 2).
    pub grid_points: usize,
    /// Total number of objective evaluations.
    pub budget: usize,
    pub workers: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self { grid_points: 5, budget: 400, workers: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeResult {
    pub theta: Vec<f64>,
    pub value: f64,
    /// Spacing of the last grid round.
    pub resolution: Vec<f64>,
    pub log: Vec<Evaluation>,
}

struct Search<'a, F> {
    f: &'a F,
    log: Vec<Evaluation>,
    workers: usize,
}

impl<F: Fn(&[f64]) -> Result<f64> + Sync> Search<'_, F> {
    fn eval_batch(&mut self, phase: Phase, points: Vec<Vec<f64>>) -> Result<()> {
        let f = self.f;
        let results = par_map(points.len(), self.workers, |k| Ok(f(&points[k])))?;
        for (theta, r) in points.into_iter().zip(results) {
            let index = self.log.len();
            let (value, error) = match r {
                Ok(v) if v.is_finite() => (Some(v), None),
                Ok(v) => (None, Some(format!("non-finite value {v}"))),
                Err(e) => (None, Some(e.to_string())),
            };
            self.log.push(Evaluation { index, phase, theta, value, error });
        }
        Ok(())
    }

    fn eval_one(&mut self, phase: Phase, theta: Vec<f64>) -> Result<f64> {
        self.eval_batch(phase, vec![theta])?;
        Ok(self.log.last().and_then(|e| e.value).unwrap_or(f64::INFINITY))
    }

    fn best(&self) -> Option<&Evaluation> {
        // First minimum in evaluation order, so ties resolve deterministically.
        self.log.iter().filter(|e| e.value.is_some()).fold(None, |b: Option<&Evaluation>, e| match b {
            Some(b) if b.value <= e.value => Some(b),
            _ => Some(e),
        })
    }
}

fn tensor_grid(lo: &[f64], hi: &[f64], n: usize) -> Vec<Vec<f64>> {
    let dim = lo.len();
    let total = n.pow(dim as u32);
    (0..total)
        .map(|mut k| {
            (0..dim)
                .map(|j| {
                    let i = k % n;
                    k /= n;
                    if hi[j] == lo[j] {
                        lo[j]
                    } else {
                        lo[j] + (hi[j] - lo[j]) * i as f64 / (n - 1) as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Tensor grid over the box, repeated grid refinement around the incumbent
/// while a full round fits the budget, then a Nelder–Mead polish with what
/// is left. Rejected θ count towards the budget and score +∞.
pub fn minimize_cost<F>(f: &F, lower: &[f64], upper: &[f64], opts: &MinimizeOptions) -> Result<MinimizeResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let dim = lower.len();
    if dim == 0 || upper.len() != dim {
        return Err(Error::Config("box bounds must be nonempty and of equal length".into()));
    }
    let n = opts.grid_points;
    if n < 2 {
        return Err(Error::Config("grid needs at least 2 points per coordinate".into()));
    }
    let round = n.pow(dim as u32);
    if opts.budget < round {
        return Err(Error::Config(format!("budget {} is below the initial grid size {round}", opts.budget)));
    }
    let mut search = Search { f, log: Vec::new(), workers: opts.workers };
    let mut lo = lower.to_vec();
    let mut hi = upper.to_vec();
    search.eval_batch(Phase::Grid, tensor_grid(&lo, &hi, n))?;
    let mut spacing: Vec<f64> = (0..dim).map(|j| (hi[j] - lo[j]) / (n - 1) as f64).collect();

    while opts.budget - search.log.len() >= round + dim + 1 {
        let Some(best) = search.best() else { break };
        let center = best.theta.clone();
        for j in 0..dim {
            lo[j] = (center[j] - spacing[j]).max(lower[j]);
            hi[j] = (center[j] + spacing[j]).min(upper[j]);
        }
        let new_spacing: Vec<f64> = (0..dim).map(|j| (hi[j] - lo[j]) / (n - 1) as f64).collect();
        if new_spacing.iter().zip(&spacing).all(|(a, b)| *a >= *b) {
            break;
        }
        spacing = new_spacing;
        search.eval_batch(Phase::Refine, tensor_grid(&lo, &hi, n))?;
    }

    if let Some(best) = search.best() {
        let start = best.theta.clone();
        let start_value = best.value.unwrap_or(f64::INFINITY);
        nelder_mead(&mut search, start, start_value, &spacing, lower, upper, opts.budget)?;
    }

    let best = search.best().ok_or_else(|| Error::Domain("no admissible θ was evaluated".into()))?;
    Ok(MinimizeResult { theta: best.theta.clone(), value: best.value.expect("filtered"), resolution: spacing, log: search.log })
}

fn nelder_mead<F: Fn(&[f64]) -> Result<f64> + Sync>(
    search: &mut Search<'_, F>,
    start: Vec<f64>,
    start_value: f64,
    step: &[f64],
    lower: &[f64],
    upper: &[f64],
    budget: usize,
) -> Result<()> {
    let dim = start.len();
    let clamp = |p: Vec<f64>| -> Vec<f64> { p.iter().enumerate().map(|(j, v)| v.clamp(lower[j], upper[j])).collect() };
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(start.clone(), start_value)];
    for j in 0..dim {
        if search.log.len() >= budget {
            return Ok(());
        }
        let mut p = start.clone();
        let s = 0.5 * step[j];
        p[j] = if p[j] + s <= upper[j] { p[j] + s } else { p[j] - s };
        let p = clamp(p);
        let v = search.eval_one(Phase::NelderMead, p.clone())?;
        simplex.push((p, v));
    }
    let tol: Vec<f64> = (0..dim).map(|j| 1e-6 * (upper[j] - lower[j]).max(1e-12)).collect();
    while search.log.len() < budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = (0..dim).all(|j| {
            let (mn, mx) = simplex.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0[j]), b.max(p.0[j])));
            mx - mn < tol[j]
        });
        if spread {
            break;
        }
        let centroid: Vec<f64> =
            (0..dim).map(|j| simplex[..dim].iter().map(|p| p.0[j]).sum::<f64>() / dim as f64).collect();
        let worst = simplex[dim].clone();
        let along = |c: f64| clamp((0..dim).map(|j| centroid[j] + c * (worst.0[j] - centroid[j])).collect());
        let xr = along(-1.0);
        let fr = search.eval_one(Phase::NelderMead, xr.clone())?;
        if fr < simplex[0].1 {
            if search.log.len() >= budget {
                simplex[dim] = (xr, fr);
                break;
            }
            let xe = along(-2.0);
            let fe = search.eval_one(Phase::NelderMead, xe.clone())?;
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
        } else {
            if search.log.len() >= budget {
                break;
            }
            let (xc, fc) = if fr < worst.1 {
                let x = along(-0.5);
                let v = search.eval_one(Phase::NelderMead, x.clone())?;
                (x, v)
            } else {
                let x = along(0.5);
                let v = search.eval_one(Phase::NelderMead, x.clone())?;
                (x, v)
            };
            if fc < worst.1.min(fr) {
                simplex[dim] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for k in 1..=dim {
                    if search.log.len() >= budget {
                        return Ok(());
                    }
                    let p: Vec<f64> = (0..dim).map(|j| best[j] + 0.5 * (simplex[k].0[j] - best[j])).collect();
                    let v = search.eval_one(Phase::NelderMead, p.clone())?;
                    simplex[k] = (p, v);
                }
            }
        }
    }
    Ok(())
}

/// One JSON object per line.
pub fn write_log_jsonl<W: Write>(mut out: W, log: &[Evaluation]) -> Result<()> {
    for e in log {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::problem::{CoefficientSet, SourceData};
    use crate::sde::SimConfig;

    fn survival_problem() -> Problem {
        let data = SourceData::new(Expr::constant(0.0), Expr::constant(0.0), Expr::constant(1.0));
        Problem::new(CoefficientSet::isotropic(2, 0.5), data, 1.0).unwrap()
    }

    fn model() -> ShapeModel {
        ShapeModel::new(
            ShapeFamily::StaticBall,
            FixedDomain::unit_disk_half_robin(),
            1.0,
            0.1,
            vec![-0.3, -0.5, 0.1],
            vec![0.3, -0.1, 0.3],
        )
        .unwrap()
    }

    fn small_spec() -> ObservationSpec {
        ObservationSpec { arc: [std::f64::consts::FRAC_PI_4, 3.0 * std::f64::consts::FRAC_PI_4], n_points: 6, n_times: 6 }
    }

    const GRID: FdGrid = FdGrid::Polar { radial: 10, angular: 32, steps: 16 };

    #[test]
    fn admissibility_is_enforced() {
        let m = model();
        assert!(m.param(&[0.0, -0.3, 0.2]).is_ok());
        assert!(m.param(&[0.0, -0.3, 0.5]).is_err());
        assert!(m.param(&[0.0, -0.3]).is_err());
        let tight = ShapeModel { upper: vec![0.3, -0.1, 0.9], ..m };
        assert!(tight.param(&[0.0, -0.3, 0.8]).is_err());
    }

    #[test]
    fn cost_vanishes_on_own_trace_and_grows_with_perturbation() {
        let p = survival_problem();
        let m = model();
        let spec = small_spec();
        let theta = [0.0, -0.3, 0.2];
        let data = synthetic_data(&p, &m, &theta, &spec, &GRID).unwrap();
        let solver = TraceSolver::Fd { grid: GRID };
        let v0 = cost_functional(&p, &m, &theta, &data.d, &spec, &solver).unwrap();
        assert_eq!(v0.value, 0.0);
        let mut last = 0.0;
        for dr in [0.02, 0.05, 0.08] {
            let v = cost_functional(&p, &m, &[0.0, -0.3, 0.2 + dr], &data.d, &spec, &solver).unwrap().value;
            assert!(v > last, "{v} <= {last}");
            last = v;
        }
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let p = survival_problem();
        let m = model();
        let spec = small_spec();
        let data = synthetic_data(&p, &m, &[0.0, -0.3, 0.2], &spec, &GRID).unwrap();
        let other = ObservationSpec { n_points: 5, ..spec.clone() };
        let err = cost_functional(&p, &m, &[0.0, -0.3, 0.2], &data.d, &other, &TraceSolver::Fd { grid: GRID });
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn constant_sequence_has_zero_gaps() {
        let p = survival_problem();
        let m = model();
        let spec = small_spec();
        let d = synthetic_data(&p, &m, &[0.1, -0.3, 0.2], &spec, &GRID).unwrap().d;
        let theta = vec![0.0, -0.3, 0.2];
        let rep = continuity_experiment(
            &p,
            &m,
            &[theta.clone(), theta.clone()],
            &theta,
            &d,
            &spec,
            &TraceSolver::Fd { grid: GRID },
            &HausdorffSampling { points_per_component: 32, time_steps: 4 },
        )
        .unwrap();
        for r in &rep.rows {
            assert_eq!(r.gap, 0.0);
            assert_eq!(r.hausdorff, 0.0);
        }
        assert!(rep.limit_value.value > 0.0);
    }

    #[test]
    fn local_time_cost_with_unit_residual_is_window_local_time() {
        let p = survival_problem();
        let dom = model().param(&[0.0, -0.3, 0.2]).unwrap().domain;
        let spec = small_spec();
        let cfg = McConfig::new(SimConfig::new(2e-3, 5), 400).with_workers(1);
        let one = |_: f64, _: &Point, _: f64| 1.0;
        let a = window_local_time(0.0, &one, &spec, &p, &dom, &cfg).unwrap();
        // Independent accumulation through the trace recorder.
        let sim = Simulator::new(&p, &dom, cfg.sim).unwrap();
        let starts = spec.points(&dom).unwrap();
        let mut total = Vec::new();
        for k in 0..cfg.n_paths {
            let mut rec = crate::sde::TraceRecorder::default();
            sim.simulate_path_observed(0.0, &starts[k % starts.len()], 0, k as u64, &mut rec).unwrap();
            let mut l_prev = 0.0;
            let mut acc = 0.0;
            for row in &rec.rows {
                if row.event == "reflect" {
                    let xb = dom.base().project(&row.x);
                    if in_window(&dom, &spec, &xb) && dom.classify_boundary(&xb) == BoundaryClass::Robin {
                        acc += row.l - l_prev;
                    }
                }
                l_prev = row.l;
            }
            total.push(acc);
        }
        let b = Estimate::from_samples(&total);
        assert!((a.mean - b.mean).abs() < 1e-9 * (1.0 + b.mean), "{} vs {}", a.mean, b.mean);
        assert!(a.mean > 0.0);
        let zero = |_: f64, _: &Point, _: f64| 0.0;
        assert_eq!(window_local_time(0.5, &zero, &spec, &p, &dom, &cfg).unwrap().mean, 0.0);
    }

    #[test]
    fn minimizer_finds_quadratic_minimum_and_respects_budget() {
        let target = [0.31, -0.42];
        let f = |x: &[f64]| Ok((x[0] - target[0]).powi(2) + 3.0 * (x[1] - target[1]).powi(2));
        let opts = MinimizeOptions { grid_points: 5, budget: 150, workers: 1 };
        let r = minimize_cost(&f, &[-1.0, -1.0], &[1.0, 1.0], &opts).unwrap();
        assert!(r.log.len() <= 150);
        assert!((r.theta[0] - target[0]).abs() < 1e-3 && (r.theta[1] - target[1]).abs() < 1e-3, "{:?}", r.theta);
        assert!(r.log.iter().filter_map(|e| e.value).all(|v| v >= r.value));

        let grid_only = MinimizeOptions { grid_points: 5, budget: 25, workers: 1 };
        let g = minimize_cost(&f, &[-1.0, -1.0], &[1.0, 1.0], &grid_only).unwrap();
        assert_eq!(g.log.len(), 25);
        assert_eq!(g.theta, vec![0.5, -0.5]);
        assert!(matches!(minimize_cost(&f, &[-1.0, -1.0], &[1.0, 1.0], &MinimizeOptions { budget: 24, ..grid_only }), Err(Error::Config(_))));
    }

    #[test]
    fn rejected_points_are_logged_not_fatal() {
        let f = |x: &[f64]| if x[0] > 0.5 { Err(Error::Domain("no".into())) } else { Ok((x[0] - 0.2).powi(2)) };
        let r = minimize_cost(&f, &[0.0], &[1.0], &MinimizeOptions { grid_points: 5, budget: 40, workers: 1 }).unwrap();
        assert!(r.log.iter().any(|e| e.error.is_some()));
        assert!((r.theta[0] - 0.2).abs() < 1e-3);
        let mut buf = Vec::new();
        write_log_jsonl(&mut buf, &r.log).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), r.log.len());
    }
}
