//! Monte Carlo estimates of the stochastic solution and path diagnostics.
//!
//! A path contributes `−∫e^Z f dt − ∫e^Z ψ dL + e^{Z(T)} h(X(T))·1{not stopped}`.
//! Path results are gathered in path-index order and reduced with
//! compensated summation, so estimates do not depend on the worker count.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, BoundaryClass, Point, TimeVaryingDomain};
use crate::problem::Problem;
use crate::sde::{Observer, PathRecord, PathState, SimConfig, Simulator, StepEvent, StopRule};

/// Neumaier compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = CompensatedSum::default();
    for v in values {
        s.add(v);
    }
    s.value()
}

/// Sample mean and standard error `sample_std/√n`.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = compensated_sum(values.iter().copied()) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    (mean, (ss / (n - 1) as f64 / n as f64).sqrt())
}

/// Maps `f` over `0..n` on `workers` threads (0 = all available), keeping
/// results in index order.
pub fn par_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if workers != 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
    }
    let _ = workers;
    (0..n).map(f).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    /// Means of the source, Robin and terminal terms (with their signs).
    pub breakdown: [f64; 3],
}

impl Estimate {
    /// A deterministic value with zero error.
    pub fn exact(value: f64, n_paths: usize) -> Self {
        Self { mean: value, std_error: 0.0, n_paths, breakdown: [0.0, 0.0, value] }
    }

    pub fn from_samples(samples: &[f64]) -> Self {
        let (mean, std_error) = mean_and_se(samples);
        Self { mean, std_error, n_paths: samples.len(), breakdown: [0.0, 0.0, mean] }
    }

    fn from_terms(terms: &[[f64; 3]]) -> Self {
        let n = terms.len() as f64;
        let totals: Vec<f64> = terms.iter().map(|t| t[0] + t[1] + t[2]).collect();
        let (mean, std_error) = mean_and_se(&totals);
        let breakdown = std::array::from_fn(|k| compensated_sum(terms.iter().map(|t| t[k])) / n);
        Self { mean, std_error, n_paths: terms.len(), breakdown }
    }
}

/// Monte Carlo settings shared by every estimator entry point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub sim: SimConfig,
    pub n_paths: usize,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    /// Reuse the same path noise at every evaluation point.
    pub common_random_numbers: bool,
}

impl McConfig {
    pub fn new(sim: SimConfig, n_paths: usize) -> Self {
        Self { sim, n_paths, workers: 0, common_random_numbers: false }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_crn(mut self, on: bool) -> Self {
        self.common_random_numbers = on;
        self
    }

    fn point_seed(&self, point_index: u64) -> u64 {
        if self.common_random_numbers {
            0
        } else {
            point_index
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(Error::Config(format!("need at least 2 paths, got {}", self.n_paths)));
        }
        Ok(())
    }
}

/// Signed contributions of one path to the three representation terms.
pub fn path_terms(rec: &PathRecord, problem: &Problem, domain: &TimeVaryingDomain) -> [f64; 3] {
    let terminal = if rec.stopped { 0.0 } else { rec.z_final.exp() * problem.terminal(&rec.x_final, domain) };
    [-rec.source_integral, -rec.robin_integral, terminal]
}

/// Runs `n_paths` paths from `(s, x)` and maps each record.
pub fn run_paths<T, F>(
    problem: &Problem,
    domain: &TimeVaryingDomain,
    sim: SimConfig,
    s: f64,
    x: &Point,
    point_index: u64,
    n_paths: usize,
    workers: usize,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&PathRecord) -> T + Sync + Send,
{
    let simulator = Simulator::new(problem, domain, sim)?;
    par_map(n_paths, workers, |k| simulator.simulate_path(s, x, point_index, k as u64).map(|r| f(&r)))
}

/// Monte Carlo value of the stochastic solution at `(s, x)`.
pub fn stochastic_solution(
    s: f64,
    x: &Point,
    problem: &Problem,
    domain: &TimeVaryingDomain,
    cfg: &McConfig,
    point_index: u64,
) -> Result<Estimate> {
    cfg.check()?;
    let sim = Simulator::new(problem, domain, cfg.sim)?;
    if sim.starts_in_dirichlet(s, x)? {
        return Ok(Estimate::exact(0.0, cfg.n_paths));
    }
    let idx = cfg.point_seed(point_index);
    let terms = par_map(cfg.n_paths, cfg.workers, |k| {
        sim.simulate_path(s, x, idx, k as u64).map(|r| path_terms(&r, problem, domain))
    })?;
    Ok(Estimate::from_terms(&terms))
}

/// Per-path totals at `(s, x)`, in path order; all zero when the start
/// point is already stopped.
pub fn path_samples(
    s: f64,
    x: &Point,
    problem: &Problem,
    domain: &TimeVaryingDomain,
    cfg: &McConfig,
    point_index: u64,
) -> Result<Vec<f64>> {
    cfg.check()?;
    let sim = Simulator::new(problem, domain, cfg.sim)?;
    if sim.starts_in_dirichlet(s, x)? {
        return Ok(vec![0.0; cfg.n_paths]);
    }
    let idx = cfg.point_seed(point_index);
    par_map(cfg.n_paths, cfg.workers, |k| {
        sim.simulate_path(s, x, idx, k as u64).map(|r| path_terms(&r, problem, domain).iter().sum())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRow {
    pub s: f64,
    pub x: Point,
    /// `None` when the point was skipped.
    pub estimate: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldTable {
    pub dim: usize,
    pub dt: f64,
    pub seed: u64,
    pub rows: Vec<FieldRow>,
    pub warnings: Vec<String>,
}

/// Estimates at each grid point; points at Π are skipped with a warning.
pub fn solution_field(
    grid: &[(f64, Point)],
    problem: &Problem,
    domain: &TimeVaryingDomain,
    cfg: &McConfig,
) -> Result<FieldTable> {
    let mut rows = Vec::with_capacity(grid.len());
    let mut warnings = Vec::new();
    let tol = domain.tol_pi() * domain.base().radius();
    for (i, (s, x)) in grid.iter().enumerate() {
        if domain.base().dist_to_pi(x) <= tol {
            warnings.push(format!("skipped ({s}, {:?}): on the Robin/Dirichlet border", &x[..domain.dim()]));
            rows.push(FieldRow { s: *s, x: *x, estimate: None });
            continue;
        }
        let est = stochastic_solution(*s, x, problem, domain, cfg, i as u64)?;
        rows.push(FieldRow { s: *s, x: *x, estimate: Some(est) });
    }
    Ok(FieldTable { dim: domain.dim(), dt: cfg.sim.dt, seed: cfg.sim.master_seed, rows, warnings })
}

/// Writes a field table as CSV: `s, x1.., mean, std_error, term1..3, n_paths, dt, seed`.
pub fn write_field_csv<W: Write>(out: W, table: &FieldTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["s".to_string()];
    header.extend((1..=table.dim).map(|i| format!("x{i}")));
    header.extend(["mean", "std_error", "term1", "term2", "term3", "n_paths", "dt", "seed"].map(String::from));
    w.write_record(&header)?;
    for row in &table.rows {
        let mut rec = vec![row.s.to_string()];
        rec.extend(row.x[..table.dim].iter().map(f64::to_string));
        match &row.estimate {
            Some(e) => {
                rec.extend([e.mean, e.std_error, e.breakdown[0], e.breakdown[1], e.breakdown[2]].map(|v| v.to_string()));
                rec.push(e.n_paths.to_string());
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 6)),
        }
        rec.push(table.dt.to_string());
        rec.push(table.seed.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Occupation time of the collar `{φ < ε}` scaled into a local-time estimate:
/// `L ≈ (n·A·n)/(β·n) · (1/ε) ∫ 1{φ < ε} dt`.
pub struct OccupationObserver<'a> {
    domain: &'a TimeVaryingDomain,
    problem: &'a Problem,
    eps: f64,
    pub value: f64,
}

impl<'a> OccupationObserver<'a> {
    pub fn new(domain: &'a TimeVaryingDomain, problem: &'a Problem, eps: f64) -> Self {
        Self { domain, problem, eps, value: 0.0 }
    }
}

impl Observer for OccupationObserver<'_> {
    fn on_step(&mut self, before: &PathState, after: &PathState, _event: &StepEvent) {
        let base = self.domain.base();
        if base.signed_distance(&before.x) < self.eps {
            let xb = base.project(&before.x);
            let n = base.inward_normal(&before.x);
            let nd = self.problem.nondiv();
            let t = before.t.min(self.problem.horizon());
            let beta = nd.beta(t, &xb, &n);
            let a = nd.diffusion(t, &xb);
            let ann: f64 = (0..3).map(|i| n[i] * (0..3).map(|j| a[i][j] * n[j]).sum::<f64>()).sum();
            self.value += ann / dot(&beta, &n) * (after.t - before.t) / self.eps;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTimeStats {
    pub mean_l: Estimate,
    pub occupation: Estimate,
    pub eps: f64,
    /// `(λ, E[e^{λL(T)}])`.
    pub moments: Vec<(f64, Estimate)>,
}

/// Pure-reflection run from `(s, x)` to T: mean local time, the
/// occupation-time estimate and exponential moments in one pass.
pub fn local_time_stats(
    s: f64,
    x: &Point,
    lambdas: &[f64],
    eps: f64,
    problem: &Problem,
    domain: &TimeVaryingDomain,
    cfg: &McConfig,
    point_index: u64,
) -> Result<LocalTimeStats> {
    cfg.check()?;
    if lambdas.iter().any(|l| *l < 0.0) {
        return Err(Error::Config("exponential moments need lambda >= 0".into()));
    }
    let sim_cfg = cfg.sim.with_stop_rule(StopRule::ReflectOnly);
    let sim = Simulator::new(problem, domain, sim_cfg)?;
    let idx = cfg.point_seed(point_index);
    let pairs = par_map(cfg.n_paths, cfg.workers, |k| {
        let mut occ = OccupationObserver::new(domain, problem, eps);
        let rec = sim.simulate_path_observed(s, x, idx, k as u64, &mut occ)?;
        Ok((rec.l_final, occ.value))
    })?;
    let ls: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let occ: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let moments = lambdas
        .iter()
        .map(|&lam| {
            if lam == 0.0 {
                (lam, Estimate::exact(1.0, cfg.n_paths))
            } else {
                let v: Vec<f64> = ls.iter().map(|l| (lam * l).exp()).collect();
                (lam, Estimate::from_samples(&v))
            }
        })
        .collect();
    Ok(LocalTimeStats { mean_l: Estimate::from_samples(&ls), occupation: Estimate::from_samples(&occ), eps, moments })
}

/// `E[e^{λL(T)}]` under pure reflection.
pub fn local_time_moment(
    s: f64,
    x: &Point,
    lambda: f64,
    problem: &Problem,
    domain: &TimeVaryingDomain,
    cfg: &McConfig,
    point_index: u64,
) -> Result<Estimate> {
    if lambda == 0.0 {
        return Ok(Estimate::exact(1.0, cfg.n_paths));
    }
    let stats = local_time_stats(s, x, &[lambda], 0.05, problem, domain, cfg, point_index)?;
    Ok(stats.moments[0].1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub distance: f64,
    pub x: Point,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target_class: ProbeTarget,
    /// Estimate at the target itself (zero on the Dirichlet part).
    pub target: Estimate,
    pub rows: Vec<ProbeRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    Dirichlet,
    Robin,
}

/// Estimates along an approach sequence towards a lateral-boundary target.
pub fn boundary_continuity_probe(
    s: f64,
    target: &Point,
    approach: &[Point],
    pi_collar: f64,
    problem: &Problem,
    domain: &TimeVaryingDomain,
    cfg: &McConfig,
) -> Result<ProbeReport> {
    if domain.base().dist_to_pi(target) <= pi_collar {
        return Err(Error::Domain("probe target lies in the collar around the Robin/Dirichlet border".into()));
    }
    let on_cavity = domain.cavity_at(s).is_some_and(|(c, r)| (crate::geometry::distance(target, &c) - r).abs() < 1e-9);
    let class = domain.classify_point(s, target)?;
    let target_class = match class {
        BoundaryClass::DirichletFixed | BoundaryClass::Pi => ProbeTarget::Dirichlet,
        _ if on_cavity => ProbeTarget::Dirichlet,
        BoundaryClass::Robin => ProbeTarget::Robin,
        BoundaryClass::Interior => {
            return Err(Error::Domain("probe target must lie on the lateral boundary".into()));
        }
    };
    let target_est = match target_class {
        ProbeTarget::Dirichlet => Estimate::exact(0.0, cfg.n_paths),
        ProbeTarget::Robin => stochastic_solution(s, target, problem, domain, cfg, 0)?,
    };
    let rows = approach
        .iter()
        .map(|x| {
            let estimate = stochastic_solution(s, x, problem, domain, cfg, 0)?;
            Ok(ProbeRow { distance: crate::geometry::distance(x, target), x: *x, estimate })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport { target_class, target: target_est, rows })
}

/// Fraction of paths with a reflection within each ε of Π before the stop.
pub fn pi_attainability_stat(
    s: f64,
    x: &Point,
    eps_list: &[f64],
    problem: &Problem,
    domain: &TimeVaryingDomain,
    cfg: &McConfig,
) -> Result<Vec<f64>> {
    if !domain.base().has_pi() {
        return Ok(vec![0.0; eps_list.len()]);
    }
    cfg.check()?;
    let sim = Simulator::new(problem, domain, cfg.sim)?;
    let mins = par_map(cfg.n_paths, cfg.workers, |k| sim.simulate_path(s, x, 0, k as u64).map(|r| r.min_pi_distance))?;
    Ok(eps_list
        .iter()
        .map(|eps| mins.iter().filter(|d| **d <= *eps).count() as f64 / mins.len() as f64)
        .collect())
}

/// Sample `P(σ ≥ s + 2η)` for each start point.
pub fn dirichlet_proximity_stat(
    s: f64,
    points: &[Point],
    eta: f64,
    problem: &Problem,
    domain: &TimeVaryingDomain,
    cfg: &McConfig,
) -> Result<Vec<Estimate>> {
    cfg.check()?;
    let sim = Simulator::new(problem, domain, cfg.sim)?;
    let cutoff = s + 2.0 * eta;
    points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            if sim.starts_in_dirichlet(s, x)? {
                return Ok(Estimate::exact(0.0, cfg.n_paths));
            }
            let idx = cfg.point_seed(i as u64);
            let v = par_map(cfg.n_paths, cfg.workers, |k| {
                sim.simulate_path(s, x, idx, k as u64).map(|r| if r.stopped && r.stop_time < cutoff { 0.0 } else { 1.0 })
            })?;
            Ok(Estimate::from_samples(&v))
        })
        .collect()
}

/// Empirical version of the sup bound on the solution:
/// `(‖f‖∞·T + ‖ψ‖∞·E[L(T)] + ‖h‖∞) · sup e^Z`.
pub fn bounded_solution_shadow(sup_f: f64, sup_psi: f64, sup_h: f64, horizon: f64, mean_l: f64, max_z: f64) -> f64 {
    (sup_f * horizon + sup_psi * mean_l + sup_h) * max_z.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::geometry::{Cavity, EndCondition, FixedDomain};
    use crate::problem::{CoefficientSet, SourceData};
    use crate::sde::Scheme;

    fn parse(s: &str, dim: usize) -> Expr {
        Expr::parse(s, dim).unwrap()
    }

    fn line() -> TimeVaryingDomain {
        TimeVaryingDomain::cylinder(FixedDomain::unit_interval(EndCondition::Robin, EndCondition::Dirichlet), 1.0)
    }

    fn line_problem(data: SourceData, sigma: f64) -> Problem {
        let c = CoefficientSet::isotropic(1, 0.5).with_sigma_rob(Expr::constant(sigma)).with_a_scal(Expr::constant(0.25));
        Problem::new(c, data, 1.0).unwrap()
    }

    fn mc(n: usize) -> McConfig {
        McConfig::new(SimConfig::new(2e-3, 11), n)
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }

    #[test]
    fn zero_data_is_exactly_zero() {
        let p = line_problem(SourceData::zero(), 1.0);
        let e = stochastic_solution(0.2, &[0.4, 0.0, 0.0], &p, &line(), &mc(500), 0).unwrap();
        assert_eq!((e.mean, e.std_error), (0.0, 0.0));
        let grid: Vec<(f64, Point)> = (0..3).map(|k| (0.1 * k as f64, [0.2 + 0.2 * k as f64, 0.0, 0.0])).collect();
        let table = solution_field(&grid, &p, &line(), &mc(100)).unwrap();
        assert!(table.rows.iter().all(|r| r.estimate.unwrap().mean == 0.0));
    }

    #[test]
    fn breakdown_sums_to_mean() {
        let data = SourceData::new(Expr::constant(1.0), Expr::constant(0.5), parse("x1*(1-x1)", 1));
        let p = line_problem(data, 1.0);
        let e = stochastic_solution(0.3, &[0.3, 0.0, 0.0], &p, &line(), &mc(2000), 4).unwrap();
        assert!((e.breakdown.iter().sum::<f64>() - e.mean).abs() <= 1e-12);
        assert!(e.breakdown[0] < 0.0 && e.breakdown[1] < 0.0 && e.breakdown[2] > 0.0);
        assert!((e.std_error - e.std_error.abs()).abs() == 0.0 && e.n_paths == 2000);
    }

    #[test]
    fn start_on_dirichlet_is_exact_zero() {
        let data = SourceData::new(Expr::constant(1.0), Expr::constant(0.5), Expr::constant(1.0));
        let p = line_problem(data, 1.0);
        let e = stochastic_solution(0.3, &[1.0, 0.0, 0.0], &p, &line(), &mc(100), 0).unwrap();
        assert_eq!(e, Estimate::exact(0.0, 100));
    }

    #[test]
    fn linearity_with_common_random_numbers() {
        let d1 = SourceData::new(parse("1 + x1", 1), Expr::constant(0.5), parse("x1*(1-x1)", 1));
        let d2 = SourceData::new(parse("sin(t)", 1), Expr::constant(-0.2), parse("1 - x1", 1));
        let sum = SourceData::new(parse("1 + x1 + sin(t)", 1), Expr::constant(0.3), parse("x1*(1-x1) + 1 - x1", 1));
        let cfg = mc(400);
        let x = [0.35, 0.0, 0.0];
        let e1 = stochastic_solution(0.1, &x, &line_problem(d1, 1.0), &line(), &cfg, 2).unwrap();
        let e2 = stochastic_solution(0.1, &x, &line_problem(d2, 1.0), &line(), &cfg, 2).unwrap();
        let es = stochastic_solution(0.1, &x, &line_problem(sum, 1.0), &line(), &cfg, 2).unwrap();
        assert!((e1.mean + e2.mean - es.mean).abs() <= 1e-12 * (1.0 + es.mean.abs()));
    }

    #[test]
    fn sign_invariant() {
        // f ≤ 0, ψ ≤ 0, h ≥ 0 and γ ≤ 0 give nonnegative path contributions
        let data = SourceData::new(parse("-1 - x1^2", 1), Expr::constant(-0.3), parse("x1*(1-x1)", 1));
        let p = line_problem(data, 0.5);
        let dom = line();
        let sim = Simulator::new(&p, &dom, SimConfig::new(2e-3, 3)).unwrap();
        for k in 0..300 {
            let rec = sim.simulate_path(0.0, &[0.1, 0.0, 0.0], 0, k).unwrap();
            assert!(path_terms(&rec, &p, &dom).iter().sum::<f64>() >= 0.0);
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let data = SourceData::new(Expr::constant(1.0), Expr::constant(0.5), parse("x1*(1-x1)", 1));
        let p = line_problem(data, 1.0);
        let a = stochastic_solution(0.0, &[0.5, 0.0, 0.0], &p, &line(), &mc(3000).with_workers(1), 0).unwrap();
        let b = stochastic_solution(0.0, &[0.5, 0.0, 0.0], &p, &line(), &mc(3000).with_workers(4), 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn survival_probability_is_a_probability() {
        let c = CoefficientSet::isotropic(2, 0.5);
        let p = Problem::new(c, SourceData::new(Expr::constant(0.0), Expr::constant(0.0), Expr::constant(1.0)), 1.0).unwrap();
        let d = TimeVaryingDomain::new(
            FixedDomain::unit_disk_half_robin(),
            Some(Cavity::fixed([0.0, 0.2, 0.0], 0.2).unwrap()),
            1.0,
            0.05,
        )
        .unwrap();
        let e = stochastic_solution(0.5, &[0.5, 0.3, 0.0], &p, &d, &mc(500), 0).unwrap();
        assert!((0.0..=1.0).contains(&e.mean));
    }

    #[test]
    fn field_skips_pi_and_single_point_matches() {
        let c = CoefficientSet::isotropic(2, 0.5);
        let p = Problem::new(c, SourceData::new(Expr::constant(0.0), Expr::constant(0.0), Expr::constant(1.0)), 1.0).unwrap();
        let d = TimeVaryingDomain::cylinder(FixedDomain::unit_disk_half_robin(), 1.0);
        let cfg = mc(200);
        let t = solution_field(&[(0.5, [1.0, 0.0, 0.0]), (0.5, [0.2, 0.1, 0.0])], &p, &d, &cfg).unwrap();
        assert!(t.rows[0].estimate.is_none() && t.warnings.len() == 1);
        let single = stochastic_solution(0.5, &[0.2, 0.1, 0.0], &p, &d, &cfg, 1).unwrap();
        assert_eq!(t.rows[1].estimate.unwrap(), single);
        let mut buf = Vec::new();
        write_field_csv(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("s,x1,x2,mean,std_error,term1,term2,term3,n_paths,dt,seed\n"));
    }

    #[test]
    fn local_time_moment_at_zero_is_one() {
        let p = Problem::new(CoefficientSet::isotropic(2, 0.5), SourceData::zero(), 1.0).unwrap();
        let d = TimeVaryingDomain::cylinder(FixedDomain::unit_disk_half_robin(), 1.0);
        let e = local_time_moment(0.0, &[0.0, 0.5, 0.0], 0.0, &p, &d, &mc(10), 0).unwrap();
        assert_eq!((e.mean, e.std_error), (1.0, 0.0));
    }

    #[test]
    fn pi_fractions_nonincreasing_and_empty_pi() {
        let p = Problem::new(CoefficientSet::isotropic(2, 0.5), SourceData::zero(), 1.0).unwrap();
        let d = TimeVaryingDomain::cylinder(FixedDomain::unit_disk_half_robin(), 1.0);
        let f = pi_attainability_stat(0.0, &[0.5, 0.1, 0.0], &[0.2, 0.1, 0.05], &p, &d, &mc(400)).unwrap();
        assert!(f[0] >= f[1] && f[1] >= f[2]);
        let p1 = line_problem(SourceData::zero(), 1.0);
        assert_eq!(pi_attainability_stat(0.0, &[0.5, 0.0, 0.0], &[0.1], &p1, &line(), &mc(10)).unwrap(), vec![0.0]);
    }

    #[test]
    fn proximity_examples() {
        let p = line_problem(SourceData::zero(), 1.0);
        let cfg = mc(400).with_crn(true);
        let e = dirichlet_proximity_stat(0.0, &[[1.0, 0.0, 0.0]], 0.1, &p, &line(), &cfg).unwrap();
        assert_eq!(e[0].mean, 0.0);
        let e = dirichlet_proximity_stat(0.0, &[[0.3, 0.0, 0.0]], 1e-4, &p, &line(), &cfg).unwrap();
        assert_eq!(e[0].mean, 1.0);
        let pts: Vec<Point> = [0.5, 0.8, 0.95].iter().map(|x| [*x, 0.0, 0.0]).collect();
        let e = dirichlet_proximity_stat(0.0, &pts, 0.05, &p, &line(), &cfg).unwrap();
        assert!(e[0].mean >= e[1].mean && e[1].mean >= e[2].mean);
    }

    #[test]
    fn probe_refuses_pi_and_interior() {
        let p = Problem::new(CoefficientSet::isotropic(2, 0.5), SourceData::zero(), 1.0).unwrap();
        let d = TimeVaryingDomain::cylinder(FixedDomain::unit_disk_half_robin(), 1.0);
        let cfg = mc(10);
        assert!(boundary_continuity_probe(0.0, &[1.0, 0.0, 0.0], &[], 0.1, &p, &d, &cfg).is_err());
        assert!(boundary_continuity_probe(0.0, &[0.5, 0.0, 0.0], &[], 0.1, &p, &d, &cfg).is_err());
        let rep = boundary_continuity_probe(0.0, &[0.0, -1.0, 0.0], &[[0.0, -0.9, 0.0]], 0.1, &p, &d, &cfg).unwrap();
        assert_eq!(rep.target_class, ProbeTarget::Dirichlet);
        assert!(rep.rows.iter().all(|r| r.estimate.mean == 0.0));
    }

    #[test]
    fn halfspace_and_projection_agree_roughly() {
        let data = SourceData::new(Expr::constant(1.0), Expr::constant(0.5), parse("x1*(1-x1)", 1));
        let p = line_problem(data, 1.0);
        let a = stochastic_solution(0.5, &[0.2, 0.0, 0.0], &p, &line(), &mc(4000), 0).unwrap();
        let cfg = McConfig::new(SimConfig::new(2e-3, 11).with_scheme(Scheme::Halfspace), 4000);
        let b = stochastic_solution(0.5, &[0.2, 0.0, 0.0], &p, &line(), &cfg, 0).unwrap();
        assert!((a.mean - b.mean).abs() < 5.0 * (a.std_error + b.std_error) + 0.02, "{a:?} {b:?}");
    }
}
