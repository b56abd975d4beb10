//! Finite-difference reference solver, run forward in reversed time `τ = T − t`.
//!
//! On an interval the divergence form is discretized by finite volumes with
//! half cells at Robin ends. On a disk with isotropic diffusion a polar grid
//! with nodes at `r = (i + ½)Δr` is used; the outer ring sits on Γ and the
//! Robin condition closes it through a ghost ring. Time stepping is
//! Crank–Nicolson after two Rannacher steps. Cavity nodes are pinned to
//! zero at each level, stencils cut by the cavity use Shortley–Weller
//! distances, and rows touching a moving cavity step with backward Euler.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expr::{Field, Var};
use crate::geometry::{BoundaryClass, Dissection, EndCondition, Point, Shape, TimeVaryingDomain};
use crate::observation::{ObservationMatrix, ObservationSpec};
use crate::problem::Problem;
use crate::sparse::{bicgstab, solve_tridiagonal, Csr, CsrBuilder, Ilu0};

/// Shortley–Weller distances are floored at this fraction of the spacing.
const MIN_CUT_FRACTION: f64 = 1e-8;
const KRYLOV_TOL: f64 = 1e-12;
const KRYLOV_MAX_ITER: usize = 5000;
const RANNACHER_STEPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FdGrid {
    /// `cells` uniform cells on the interval, `steps` uniform time steps.
    Line { cells: usize, steps: usize },
    /// `radial` rings (the last on Γ) by `angular` rays on a disk.
    Polar { radial: usize, angular: usize, steps: usize },
}

impl FdGrid {
    pub fn steps(&self) -> usize {
        match *self {
            FdGrid::Line { steps, .. } | FdGrid::Polar { steps, .. } => steps,
        }
    }

    /// Same grid with spatial and temporal resolution multiplied by `k`.
    pub fn refined(&self, k: usize) -> Self {
        match *self {
            FdGrid::Line { cells, steps } => FdGrid::Line { cells: cells * k, steps: steps * k },
            FdGrid::Polar { radial, angular, steps } => {
                FdGrid::Polar { radial: radial * k, angular: angular * k, steps: steps * k }
            }
        }
    }

    fn check(&self) -> Result<()> {
        match *self {
            FdGrid::Line { cells, steps } if cells >= 2 && steps >= 1 => Ok(()),
            FdGrid::Polar { radial, angular, steps } if radial >= 2 && angular >= 8 && angular % 2 == 0 && steps >= 1 => {
                Ok(())
            }
            _ => Err(Error::Config(format!("invalid finite-difference grid {self:?}"))),
        }
    }
}

/// Node placement of a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Nodes `a + i·h` for `i = 0..=n`.
    Line { a: f64, h: f64, n: usize },
    /// Node `(i, m)` at radius `(i + ½)·dr`, angle `2πm/n_theta`, index `i·n_theta + m`.
    Polar { center: [f64; 2], dr: f64, n_r: usize, n_theta: usize },
}

impl Layout {
    pub fn len(&self) -> usize {
        match *self {
            Layout::Line { n, .. } => n + 1,
            Layout::Polar { n_r, n_theta, .. } => n_r * n_theta,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, k: usize) -> Point {
        match *self {
            Layout::Line { a, h, .. } => [a + k as f64 * h, 0.0, 0.0],
            Layout::Polar { center, dr, n_theta, .. } => {
                let (i, m) = (k / n_theta, k % n_theta);
                let r = (i as f64 + 0.5) * dr;
                let th = TAU * m as f64 / n_theta as f64;
                [center[0] + r * th.cos(), center[1] + r * th.sin(), 0.0]
            }
        }
    }

    pub fn nodes(&self) -> Vec<Point> {
        (0..self.len()).map(|k| self.node(k)).collect()
    }

    /// Interpolation stencil `(node, weight)` for an arbitrary point.
    fn stencil(&self, x: &Point) -> Vec<(usize, f64)> {
        match *self {
            Layout::Line { a, h, n } => {
                let s = ((x[0] - a) / h).clamp(0.0, n as f64);
                let i = (s.floor() as usize).min(n - 1);
                let w = s - i as f64;
                vec![(i, 1.0 - w), (i + 1, w)]
            }
            Layout::Polar { center, dr, n_r, n_theta } => {
                let (dx, dy) = (x[0] - center[0], x[1] - center[1]);
                let r = dx.hypot(dy);
                let th = dy.atan2(dx).rem_euclid(TAU);
                let dth = TAU / n_theta as f64;
                let sm = th / dth;
                let m0 = (sm.floor() as usize) % n_theta;
                let wm = sm - sm.floor();
                let m1 = (m0 + 1) % n_theta;
                let idx = |i: usize, m: usize| i * n_theta + m;
                let r0 = 0.5 * dr;
                if r < r0 {
                    // Interpolate along the diameter through the opposite node.
                    let half = n_theta / 2;
                    let w = (r + r0) / (2.0 * r0);
                    let mut out = Vec::with_capacity(4);
                    for (m, wa) in [(m0, 1.0 - wm), (m1, wm)] {
                        out.push((idx(0, m), wa * w));
                        out.push((idx(0, (m + half) % n_theta), wa * (1.0 - w)));
                    }
                    return out;
                }
                let s = ((r - r0) / dr).min((n_r - 1) as f64);
                let i = (s.floor() as usize).min(n_r - 2);
                let wr = s - i as f64;
                vec![
                    (idx(i, m0), (1.0 - wr) * (1.0 - wm)),
                    (idx(i, m1), (1.0 - wr) * wm),
                    (idx(i + 1, m0), wr * (1.0 - wm)),
                    (idx(i + 1, m1), wr * wm),
                ]
            }
        }
    }
}

/// Solution values on every full time level, ordered by increasing `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdSolution {
    pub grid: FdGrid,
    pub layout: Layout,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// `false` on Dirichlet nodes (fixed boundary and cavity), which hold 0.
    pub active: Vec<Vec<bool>>,
    pub problem_hash: String,
}

impl FdSolution {
    /// Linear interpolation in time and (bi)linear interpolation in space.
    pub fn value_at(&self, t: f64, x: &Point) -> f64 {
        let horizon = *self.times.last().expect("at least one level");
        let n = self.times.len() - 1;
        let s = (t / horizon * n as f64).clamp(0.0, n as f64);
        let j = (s.floor() as usize).min(n.saturating_sub(1));
        let w = if n == 0 { 0.0 } else { s - j as f64 };
        let st = self.layout.stencil(x);
        let at = |level: &Vec<f64>| st.iter().map(|&(k, c)| c * level[k]).sum::<f64>();
        if w == 0.0 {
            at(&self.values[j])
        } else {
            (1.0 - w) * at(&self.values[j]) + w * at(&self.values[j + 1])
        }
    }

    /// Index of the level at `t` when `t` is a grid time.
    pub fn level_index(&self, t: f64) -> Option<usize> {
        let horizon = *self.times.last()?;
        let n = self.times.len() - 1;
        let s = t / horizon * n as f64;
        let j = s.round();
        ((s - j).abs() < 1e-9 && j >= 0.0 && j <= n as f64).then_some(j as usize)
    }
}

/// Largest |u| over all nodes and levels.
pub fn sup_norm(sol: &FdSolution) -> f64 {
    sol.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
}

/// Boundary values at the window nodes and times, time-major.
pub fn trace_on_observation(sol: &FdSolution, domain: &TimeVaryingDomain, spec: &ObservationSpec) -> Result<ObservationMatrix> {
    let points = spec.points(domain)?;
    let times = spec.times(domain.horizon());
    let mut values = Vec::with_capacity(times.len() * points.len());
    for &t in &times {
        for p in &points {
            values.push(sol.value_at(t, p));
        }
    }
    ObservationMatrix::new(times, spec.params(), values)
}

/// Dispatches on the grid kind.
pub fn solve_backward(problem: &Problem, domain: &TimeVaryingDomain, grid: &FdGrid) -> Result<FdSolution> {
    match grid {
        FdGrid::Line { .. } => solve_backward_1d(problem, domain, grid),
        FdGrid::Polar { .. } => solve_backward_2d(problem, domain, grid),
    }
}

fn problem_hash(problem: &Problem, domain: &TimeVaryingDomain, grid: &FdGrid) -> String {
    let digest = Sha256::digest(format!("{problem:?}|{domain:?}|{grid:?}").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One time level of the semi-discrete system `w_τ = M w + g`.
#[derive(Debug, Clone)]
struct Level {
    m: Csr,
    g: Vec<f64>,
    fixed: Vec<bool>,
    /// Rows whose stencil is cut by the cavity.
    near: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LinearSolver {
    Tridiagonal,
    Krylov,
}

struct Marcher<'a> {
    solver: LinearSolver,
    cache: Option<(Csr, Ilu0)>,
    domain: &'a TimeVaryingDomain,
}

impl Marcher<'_> {
    /// Advances `w` from level `old` (time `t_old`) to level `new`.
    fn step(&mut self, old: &Level, new: &Level, w: &[f64], dt: f64, force_be: bool, t_old: f64, t_new: f64) -> Result<Vec<f64>> {
        let n = w.len();
        let moving = self.domain.cavity_at(t_old) != self.domain.cavity_at(t_new);
        let mut mw = vec![0.0; n];
        old.m.mul_vec(w, &mut mw);
        let mut rhs = vec![0.0; n];
        let mut sys = CsrBuilder::new(n, old.m.vals.len() + n);
        for i in 0..n {
            if new.fixed[i] {
                sys.push(i, 1.0);
            } else {
                let be = force_be || old.fixed[i] || (moving && (old.near[i] || new.near[i]));
                let theta = if be { 1.0 } else { 0.5 };
                rhs[i] = w[i] + dt * ((1.0 - theta) * (mw[i] + old.g[i]) + theta * new.g[i]);
                sys.push(i, 1.0);
                for (j, v) in new.m.row(i) {
                    sys.push(j, -theta * dt * v);
                }
            }
            sys.finish_row();
        }
        let sys = sys.build();
        let mut out = match self.solver {
            LinearSolver::Tridiagonal => {
                let (mut lo, mut di, mut up) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    for (j, v) in sys.row(i) {
                        if j + 1 == i {
                            lo[i] = v;
                        } else if j == i {
                            di[i] = v;
                        } else if j == i + 1 {
                            up[i] = v;
                        } else {
                            return Err(Error::Solver("line operator is not tridiagonal".into()));
                        }
                    }
                }
                solve_tridiagonal(&lo, &di, &up, &rhs)?
            }
            LinearSolver::Krylov => {
                let reuse = matches!(&self.cache, Some((a, _)) if *a == sys);
                if !reuse {
                    let ilu = Ilu0::new(&sys)?;
                    self.cache = Some((sys, ilu));
                }
                let (a, ilu) = self.cache.as_ref().expect("cache filled");
                let mut x = w.to_vec();
                bicgstab(a, ilu, &rhs, &mut x, KRYLOV_TOL, KRYLOV_MAX_ITER)?;
                x
            }
        };
        for i in 0..n {
            if new.fixed[i] {
                out[i] = 0.0;
            } else if !out[i].is_finite() {
                return Err(Error::Solver(format!("non-finite value at node {i}")));
            }
        }
        Ok(out)
    }
}

fn march(
    problem: &Problem,
    domain: &TimeVaryingDomain,
    grid: &FdGrid,
    layout: Layout,
    solver: LinearSolver,
    assemble: &dyn Fn(f64) -> Result<Level>,
) -> Result<FdSolution> {
    let horizon = problem.horizon();
    let steps = grid.steps();
    let k = horizon / steps as f64;
    let n = layout.len();
    let t_of = |tau: f64| (horizon - tau).max(0.0);

    let mut level = assemble(horizon)?;
    let mut w: Vec<f64> = (0..n)
        .map(|i| if level.fixed[i] { 0.0 } else { problem.terminal(&layout.node(i), domain) })
        .collect();
    let mut values = vec![w.clone()];
    let mut active = vec![level.fixed.iter().map(|f| !f).collect::<Vec<_>>()];
    let mut marcher = Marcher { solver, cache: None, domain };

    for j in 0..steps {
        let sub = if j < RANNACHER_STEPS { 2 } else { 1 };
        let dt = k / sub as f64;
        for s in 0..sub {
            let tau0 = j as f64 * k + s as f64 * dt;
            let tau1 = if s + 1 == sub { (j + 1) as f64 * k } else { tau0 + dt };
            let next = assemble(t_of(tau1))?;
            w = marcher.step(&level, &next, &w, dt, sub > 1, t_of(tau0), t_of(tau1))?;
            level = next;
        }
        values.push(w.clone());
        active.push(level.fixed.iter().map(|f| !f).collect());
    }
    values.reverse();
    active.reverse();
    let times = (0..=steps).map(|j| if j == steps { horizon } else { j as f64 * k }).collect();
    Ok(FdSolution { grid: *grid, layout, times, values, active, problem_hash: problem_hash(problem, domain, grid) })
}

/// Crank–Nicolson solve on an interval.
pub fn solve_backward_1d(problem: &Problem, domain: &TimeVaryingDomain, grid: &FdGrid) -> Result<FdSolution> {
    grid.check()?;
    let FdGrid::Line { cells, .. } = *grid else {
        return Err(Error::Config("1D solve needs a line grid".into()));
    };
    let (Shape::Interval { a, b }, Dissection::Ends { left, right }) = (domain.base().shape(), domain.base().dissection())
    else {
        return Err(Error::Unsupported("1D solve needs an interval domain".into()));
    };
    if problem.dim() != 1 {
        return Err(Error::Config("problem dimension does not match the interval".into()));
    }
    let h = (b - a) / cells as f64;
    let layout = Layout::Line { a: *a, h, n: cells };
    let b_field: Field = problem.b_vec_field().into_iter().next().expect("one drift component");
    let (left, right) = (*left, *right);
    let assemble = |t: f64| assemble_line(problem, domain, *a, h, cells, left, right, &b_field, t);
    march(problem, domain, grid, layout, LinearSolver::Tridiagonal, &assemble)
}

#[allow(clippy::too_many_arguments)]
fn assemble_line(
    problem: &Problem,
    domain: &TimeVaryingDomain,
    a0: f64,
    h: f64,
    n: usize,
    left: EndCondition,
    right: EndCondition,
    b_field: &Field,
    t: f64,
) -> Result<Level> {
    let x = |i: usize| a0 + i as f64 * h;
    let p = |x: f64| [x, 0.0, 0.0];
    let cav = domain.cavity_at(t).map(|(c, r)| (c[0] - r, c[0] + r));
    let mut fixed: Vec<bool> = (0..=n).map(|i| domain.in_cavity(t, &p(x(i)))).collect();
    if cav.is_some() && (fixed[0] || fixed[n]) {
        return Err(Error::Domain(format!("cavity reaches the boundary at t = {t}")));
    }
    fixed[0] |= left == EndCondition::Dirichlet;
    fixed[n] |= right == EndCondition::Dirichlet;
    let diff = |x: f64| problem.diffusion(t, &p(x))[0][0];
    let adv = |x: f64| problem.a_vec(t, &p(x))[0];

    let mut near = vec![false; n + 1];
    let mut g = vec![0.0; n + 1];
    let mut m = CsrBuilder::new(n + 1, 3 * (n + 1));
    for i in 0..=n {
        if fixed[i] {
            m.finish_row();
            continue;
        }
        let xi = x(i);
        let pi = p(xi);
        let bi = b_field.eval(t, &pi);
        let asc = problem.a_scal(t, &pi);
        let fi = problem.f(t, &pi);
        if i == 0 || i == n {
            // Half cell against the Robin flux F = A u' + a u; with
            // inward normal ν the condition reads F·ν = σu + ψ.
            let (nb, nu) = if i == 0 { (1, 1.0) } else { (n - 1, -1.0) };
            let xf = xi + nu * 0.5 * h;
            let (af, vf) = (diff(xf), adv(xf));
            let sigma = problem.sigma_rob(t, &pi);
            let psi = problem.psi(t, &pi);
            let half = 0.5 * h;
            // Interior face flux seen from the node, oriented along ν.
            let c_self = -af / h + nu * 0.5 * vf;
            let c_nb = af / h + nu * 0.5 * vf;
            let d_self = c_self - sigma;
            let upwind = nu * bi / h;
            m.push(i, d_self / half + upwind - asc);
            m.push(nb, c_nb / half - upwind);
            g[i] = -psi / half - fi;
            m.finish_row();
            continue;
        }
        let (mut dl, mut dr) = (h, h);
        let (mut left_cut, mut right_cut) = (false, false);
        if let Some((lo, hi)) = cav {
            if hi < xi && hi > xi - h {
                dl = (xi - hi).max(MIN_CUT_FRACTION * h);
                left_cut = true;
            }
            if lo > xi && lo < xi + h {
                dr = (lo - xi).max(MIN_CUT_FRACTION * h);
                right_cut = true;
            }
        }
        near[i] = left_cut || right_cut;
        let (al, vl) = (diff(xi - 0.5 * dl), adv(xi - 0.5 * dl));
        let (ar, vr) = (diff(xi + 0.5 * dr), adv(xi + 0.5 * dr));
        let cell = 0.5 * (dl + dr);
        let sum = dl + dr;
        let c_r = (ar / dr + 0.5 * vr) / cell - bi * dl / (dr * sum);
        let c_l = (al / dl - 0.5 * vl) / cell + bi * dr / (dl * sum);
        let c_i = (-ar / dr + 0.5 * vr - al / dl - 0.5 * vl) / cell - bi * (dr - dl) / (dl * dr) - asc;
        if !left_cut {
            m.push(i - 1, c_l);
        }
        m.push(i, c_i);
        if !right_cut {
            m.push(i + 1, c_r);
        }
        g[i] = -fi;
        m.finish_row();
    }
    Ok(Level { m: m.build(), g, fixed, near })
}

/// Crank–Nicolson solve on a disk with isotropic diffusion `A = αI`.
pub fn solve_backward_2d(problem: &Problem, domain: &TimeVaryingDomain, grid: &FdGrid) -> Result<FdSolution> {
    grid.check()?;
    let FdGrid::Polar { radial, angular, .. } = *grid else {
        return Err(Error::Config("2D solve needs a polar grid".into()));
    };
    let Shape::Disk { center, radius } = *domain.base().shape() else {
        return Err(Error::Unsupported("2D solve needs a disk domain".into()));
    };
    if problem.dim() != 2 {
        return Err(Error::Config("problem dimension does not match the disk".into()));
    }
    let d = problem.coeffs().diffusion();
    if d[0][1].as_constant() != Some(0.0) || d[1][0].as_constant() != Some(0.0) || d[0][0] != d[1][1] {
        return Err(Error::Unsupported("the polar solver needs isotropic diffusion".into()));
    }
    let dr = radius / (radial as f64 - 0.5);
    let layout = Layout::Polar { center, dr, n_r: radial, n_theta: angular };
    let assemble = |t: f64| assemble_polar(problem, domain, &layout, t);
    march(problem, domain, grid, layout.clone(), LinearSolver::Krylov, &assemble)
}

/// Weights `(minus, centre, plus)` for u'' and u' with neighbour spacings
/// `hm` and `hp`.
#[inline]
fn nonuniform(hm: f64, hp: f64) -> ([f64; 3], [f64; 3]) {
    let s = hm + hp;
    let d2 = [2.0 / (hm * s), -2.0 / (hm * hp), 2.0 / (hp * s)];
    let d1 = [-hp / (hm * s), (hp - hm) / (hm * hp), hm / (hp * s)];
    (d2, d1)
}

/// First parameter `s ∈ (0, 1]` where `p + s(q − p)` meets the circle.
fn segment_hit(p: &Point, q: &Point, c: &Point, r: f64) -> Option<f64> {
    let d = [q[0] - p[0], q[1] - p[1]];
    let f = [p[0] - c[0], p[1] - c[1]];
    let aa = d[0] * d[0] + d[1] * d[1];
    let bb = 2.0 * (f[0] * d[0] + f[1] * d[1]);
    let cc = f[0] * f[0] + f[1] * f[1] - r * r;
    let disc = bb * bb - 4.0 * aa * cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    [(-bb - sq) / (2.0 * aa), (-bb + sq) / (2.0 * aa)].into_iter().find(|s| *s > 0.0 && *s <= 1.0)
}

/// First angular offset `φ ∈ (0, max]` along direction `dir` at which the
/// circle of radius `rho` about the disk centre meets the cavity.
fn arc_hit(rho: f64, theta: f64, dir: f64, max: f64, rel_c: [f64; 2], r: f64) -> Option<f64> {
    let dc = rel_c[0].hypot(rel_c[1]);
    if dc == 0.0 {
        return None;
    }
    let cosv = (rho * rho + dc * dc - r * r) / (2.0 * rho * dc);
    if !(-1.0..=1.0).contains(&cosv) {
        return None;
    }
    let delta = cosv.acos();
    let phi_c = rel_c[1].atan2(rel_c[0]);
    [phi_c - delta, phi_c + delta]
        .into_iter()
        .map(|a| (dir * (a - theta)).rem_euclid(TAU))
        .filter(|o| *o > 0.0 && *o <= max)
        .fold(None, |m: Option<f64>, o| Some(m.map_or(o, |v| v.min(o))))
}

fn assemble_polar(problem: &Problem, domain: &TimeVaryingDomain, layout: &Layout, t: f64) -> Result<Level> {
    let Layout::Polar { center, dr, n_r, n_theta } = *layout else { unreachable!("polar layout") };
    let n = layout.len();
    let dth = TAU / n_theta as f64;
    let idx = |i: usize, m: usize| i * n_theta + m;
    let nodes = layout.nodes();
    let cav = domain.cavity_at(t);
    let nd = problem.nondiv();
    let radius = (n_r as f64 - 0.5) * dr;

    let mut fixed = vec![false; n];
    for i in 0..n_r {
        for m in 0..n_theta {
            let k = idx(i, m);
            let in_cav = domain.in_cavity(t, &nodes[k]);
            if i + 1 == n_r {
                if in_cav {
                    return Err(Error::Domain(format!("cavity crosses Γ at t = {t}")));
                }
                fixed[k] = domain.classify_boundary(&nodes[k]) != BoundaryClass::Robin;
            } else {
                fixed[k] = in_cav;
            }
        }
    }

    let mut near = vec![false; n];
    let mut g = vec![0.0; n];
    let mut mb = CsrBuilder::new(n, 5 * n);
    for i in 0..n_r {
        let r = (i as f64 + 0.5) * dr;
        for m in 0..n_theta {
            let k = idx(i, m);
            if fixed[k] {
                mb.finish_row();
                continue;
            }
            let x = nodes[k];
            let th = dth * m as f64;
            let (er, et) = ([th.cos(), th.sin()], [-th.sin(), th.cos()]);
            let alpha = problem.diffusion(t, &x)[0][0];
            let c = nd.drift(t, &x);
            let cr = c[0] * er[0] + c[1] * er[1];
            let ct = c[0] * et[0] + c[1] * et[1];
            let cs = nd.c_scal(t, &x);
            let mut diag = cs;
            g[k] = -problem.f(t, &x);

            // Radial direction.
            let inner = if i > 0 { idx(i - 1, m) } else { idx(0, (m + n_theta / 2) % n_theta) };
            if i + 1 == n_r {
                let av = problem.a_vec(t, &x);
                let ar = av[0] * er[0] + av[1] * er[1];
                let sigma = problem.sigma_rob(t, &x);
                let psi = problem.psi(t, &x);
                let kk = 2.0 * alpha / dr + alpha / radius + cr;
                mb.push(inner, 2.0 * alpha / (dr * dr));
                diag += -2.0 * alpha / (dr * dr) - kk * (sigma + ar) / alpha;
                g[k] -= kk * psi / alpha;
            } else {
                let outer = idx(i + 1, m);
                let (mut hm, mut hp) = (dr, dr);
                let (mut cut_m, mut cut_p) = (false, false);
                if let Some((cc, rc)) = cav {
                    if let Some(s) = segment_hit(&x, &nodes[outer], &cc, rc) {
                        hp = (s * dr).max(MIN_CUT_FRACTION * dr);
                        cut_p = true;
                    }
                    if let Some(s) = segment_hit(&x, &nodes[inner], &cc, rc) {
                        hm = (s * dr).max(MIN_CUT_FRACTION * dr);
                        cut_m = true;
                    }
                }
                near[k] |= cut_m || cut_p;
                let (d2, d1) = nonuniform(hm, hp);
                let first = alpha / r + cr;
                let w = [alpha * d2[0] + first * d1[0], alpha * d2[1] + first * d1[1], alpha * d2[2] + first * d1[2]];
                if !cut_m {
                    mb.push(inner, w[0]);
                }
                diag += w[1];
                if !cut_p {
                    mb.push(outer, w[2]);
                }
            }

            // Angular direction.
            let (mut hm, mut hp) = (dth, dth);
            let (mut cut_m, mut cut_p) = (false, false);
            if let Some((cc, rc)) = cav {
                let rel = [cc[0] - center[0], cc[1] - center[1]];
                if let Some(o) = arc_hit(r, th, 1.0, dth, rel, rc) {
                    hp = o.max(MIN_CUT_FRACTION * dth);
                    cut_p = true;
                }
                if let Some(o) = arc_hit(r, th, -1.0, dth, rel, rc) {
                    hm = o.max(MIN_CUT_FRACTION * dth);
                    cut_m = true;
                }
            }
            near[k] |= cut_m || cut_p;
            let (d2, d1) = nonuniform(hm, hp);
            let (s2, s1) = (alpha / (r * r), ct / r);
            let w = [s2 * d2[0] + s1 * d1[0], s2 * d2[1] + s1 * d1[1], s2 * d2[2] + s1 * d1[2]];
            if !cut_m {
                mb.push(idx(i, (m + n_theta - 1) % n_theta), w[0]);
            }
            diag += w[1];
            if !cut_p {
                mb.push(idx(i, (m + 1) % n_theta), w[2]);
            }
            mb.push(k, diag);
            mb.finish_row();
        }
    }
    Ok(Level { m: mb.build(), g, fixed, near })
}

/// Whether any coefficient or datum depends on time.
pub fn is_autonomous(problem: &Problem) -> bool {
    let c = problem.coeffs();
    let d = problem.data();
    let exprs = c
        .diffusion()
        .iter()
        .flatten()
        .chain(c.a_vec())
        .chain(c.b_vec())
        .chain([c.a_scal(), c.sigma_rob()]);
    let field_dep = |f: &Field| matches!(f, Field::Expr(e) if e.depends_on(Var::Time));
    !exprs.into_iter().any(|e| e.depends_on(Var::Time)) && ![&d.f, &d.psi].into_iter().any(field_dep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::geometry::{Cavity, FixedDomain, Keyframe};
    use crate::problem::{CoefficientSet, SourceData};

    fn e1(s: &str) -> Expr {
        Expr::parse(s, 1).unwrap()
    }

    fn calibration_1d() -> (Problem, TimeVaryingDomain) {
        let coeffs = CoefficientSet::isotropic(1, 0.5).with_a_scal(Expr::constant(0.25)).with_sigma_rob(Expr::constant(1.0));
        let data = SourceData::new(Expr::constant(1.0), Expr::constant(0.5), e1("x1*(1-x1)"));
        let p = Problem::new(coeffs, data, 1.0).unwrap();
        let d = TimeVaryingDomain::cylinder(FixedDomain::unit_interval(EndCondition::Robin, EndCondition::Dirichlet), 1.0);
        (p, d)
    }

    /// Max nodal gap over levels with `t ≤ T/2`; the terminal data are not
    /// compatible with the source at the Dirichlet corner, which leaves a
    /// first-order layer near `t = T`.
    fn max_gap_on_coarse(coarse: &FdSolution, fine: &FdSolution, factor: usize) -> f64 {
        let mut gap: f64 = 0.0;
        for (j, level) in coarse.values.iter().enumerate().filter(|(j, _)| coarse.times[*j] <= 0.5) {
            let fl = &fine.values[j * factor];
            for (i, v) in level.iter().enumerate() {
                gap = gap.max((v - fl[i * factor]).abs());
            }
        }
        gap
    }

    #[test]
    fn zero_data_gives_zero_field() {
        let (p, d) = calibration_1d();
        let p = p.with_data(SourceData::zero());
        let sol = solve_backward_1d(&p, &d, &FdGrid::Line { cells: 20, steps: 10 }).unwrap();
        assert_eq!(sup_norm(&sol), 0.0);
    }

    #[test]
    fn dirichlet_end_is_exactly_zero_and_terminal_matches() {
        let (p, d) = calibration_1d();
        let sol = solve_backward_1d(&p, &d, &FdGrid::Line { cells: 40, steps: 40 }).unwrap();
        for level in &sol.values {
            assert_eq!(*level.last().unwrap(), 0.0);
        }
        let last = sol.values.last().unwrap();
        assert!((last[20] - 0.25).abs() < 1e-15);
        assert!(sol.values.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn richardson_ratio_is_near_four() {
        let (p, d) = calibration_1d();
        let g = FdGrid::Line { cells: 40, steps: 40 };
        let s1 = solve_backward_1d(&p, &d, &g).unwrap();
        let s2 = solve_backward_1d(&p, &d, &g.refined(2)).unwrap();
        let s4 = solve_backward_1d(&p, &d, &g.refined(4)).unwrap();
        let e12 = max_gap_on_coarse(&s1, &s2, 2);
        let e24 = max_gap_on_coarse(&s2, &s4, 2);
        let ratio = e12 / e24;
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio} ({e12}, {e24})");
    }

    #[test]
    fn steady_state_matches_exact_solution() {
        // u = x² − 1 is a steady solution of u_t + u'' = 2 with
        // −u'(0) + u(0) = −1 and u(1) = 0; the scheme is exact on quadratics.
        let coeffs = CoefficientSet::isotropic(1, 1.0).with_sigma_rob(Expr::constant(1.0));
        let data = SourceData::new(Expr::constant(2.0), Expr::constant(1.0), e1("x1^2 - 1"));
        let p = Problem::new(coeffs, data, 1.0).unwrap();
        let d = TimeVaryingDomain::cylinder(FixedDomain::unit_interval(EndCondition::Robin, EndCondition::Dirichlet), 1.0);
        let sol = solve_backward_1d(&p, &d, &FdGrid::Line { cells: 16, steps: 8 }).unwrap();
        for level in &sol.values {
            for (i, v) in level.iter().enumerate() {
                let x = i as f64 / 16.0;
                assert!((v - (x * x - 1.0)).abs() < 1e-11, "{i}: {v}");
            }
        }
    }

    #[test]
    fn maximum_principle_without_sources() {
        let coeffs = CoefficientSet::isotropic(1, 0.3).with_a_scal(Expr::constant(0.5)).with_sigma_rob(Expr::constant(0.7));
        let data = SourceData::new(Expr::constant(0.0), Expr::constant(0.0), e1("sin(pi*x1) + 0.2"));
        let p = Problem::new(coeffs, data, 1.0).unwrap();
        let d = TimeVaryingDomain::cylinder(FixedDomain::unit_interval(EndCondition::Robin, EndCondition::Dirichlet), 1.0);
        let sol = solve_backward_1d(&p, &d, &FdGrid::Line { cells: 50, steps: 100 }).unwrap();
        assert!(sup_norm(&sol) <= 1.2 + 1e-12);
    }

    #[test]
    fn line_cavity_pins_nodes_and_cuts_stencils() {
        let (p, _) = calibration_1d();
        let cav = Cavity::new(vec![
            Keyframe { t: 0.0, center: [0.5, 0.0, 0.0], radius: 0.05 },
            Keyframe { t: 1.0, center: [0.6, 0.0, 0.0], radius: 0.05 },
        ])
        .unwrap();
        let base = FixedDomain::unit_interval(EndCondition::Robin, EndCondition::Dirichlet);
        let d = TimeVaryingDomain::new(base, Some(cav), 1.0, 0.1).unwrap();
        let sol = solve_backward_1d(&p, &d, &FdGrid::Line { cells: 100, steps: 100 }).unwrap();
        for (j, level) in sol.values.iter().enumerate() {
            for (i, v) in level.iter().enumerate() {
                let x = sol.layout.node(i);
                if d.in_cavity(sol.times[j], &x) {
                    assert_eq!(*v, 0.0);
                    assert!(!sol.active[j][i]);
                }
            }
        }
        assert!(sol.values.iter().flatten().all(|v| v.is_finite()));
    }

    fn disk_problem(alpha: f64, f: f64, h: &str) -> Problem {
        let coeffs = CoefficientSet::isotropic(2, alpha);
        let data = SourceData::new(Expr::constant(f), Expr::constant(0.0), Expr::parse(h, 2).unwrap());
        Problem::new(coeffs, data, 1.0).unwrap()
    }

    #[test]
    fn polar_zero_data_is_zero() {
        let p = disk_problem(0.5, 0.0, "0");
        let d = TimeVaryingDomain::cylinder(FixedDomain::unit_disk_half_robin(), 1.0);
        let sol = solve_backward_2d(&p, &d, &FdGrid::Polar { radial: 8, angular: 16, steps: 4 }).unwrap();
        assert_eq!(sup_norm(&sol), 0.0);
    }

    #[test]
    fn polar_neumann_keeps_constants() {
        // Whole circle Robin with σ = 0, zero sources: u ≡ 1 is exact.
        let p = disk_problem(0.5, 0.0, "1");
        let base = FixedDomain::new(
            Shape::Disk { center: [0.0, 0.0], radius: 1.0 },
            Dissection::Arc { start: 0.0, end: TAU },
            0.5,
        )
        .unwrap();
        let d = TimeVaryingDomain::cylinder(base, 1.0);
        let sol = solve_backward_2d(&p, &d, &FdGrid::Polar { radial: 12, angular: 24, steps: 8 }).unwrap();
        for v in sol.values.iter().flatten() {
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn polar_dirichlet_disk_matches_series() {
        // u_t + αΔu = 0 on the unit disk, u = 0 on Γ, h = J0(j₀ r):
        // u = e^{α j₀² (t − T)} J0(j₀ r). Checked at the centre where J0 = 1.
        let j0: f64 = 2.404_825_557_695_773;
        let base = FixedDomain::new(
            Shape::Disk { center: [0.0, 0.0], radius: 1.0 },
            Dissection::Arc { start: 0.0, end: 0.0 },
            0.5,
        )
        .unwrap();
        let d = TimeVaryingDomain::cylinder(base, 1.0);
        // J0 via its power series, accurate to 1e-12 on [0, j₀].
        let series = (0..20)
            .map(|k| {
                let fact: f64 = (1..=k).map(|v| v as f64).product();
                let c = (-1f64).powi(k) / (fact * fact) * (j0 / 2.0).powi(2 * k);
                format!("({c:e})*(x1^2+x2^2)^{k}")
            })
            .collect::<Vec<_>>()
            .join(" + ");
        let p = disk_problem(0.1, 0.0, &series);
        let sol = solve_backward_2d(&p, &d, &FdGrid::Polar { radial: 40, angular: 64, steps: 80 }).unwrap();
        let exact = (-0.1 * j0 * j0).exp();
        let got = sol.value_at(0.0, &[0.0, 0.0, 0.0]);
        assert!((got - exact).abs() < 2e-3, "{got} vs {exact}");
    }

    fn moving_cavity_domain() -> TimeVaryingDomain {
        let cav = Cavity::new(vec![
            Keyframe { t: 0.0, center: [0.0, -0.3, 0.0], radius: 0.2 },
            Keyframe { t: 0.5, center: [0.0, -0.3, 0.0], radius: 0.2 },
            Keyframe { t: 1.0, center: [0.3, -0.2, 0.0], radius: 0.2 },
        ])
        .unwrap();
        TimeVaryingDomain::new(FixedDomain::unit_disk_half_robin(), Some(cav), 1.0, 0.2).unwrap()
    }

    #[test]
    fn polar_cavity_nodes_are_zero() {
        let p = disk_problem(0.5, 0.0, "1");
        let d = moving_cavity_domain();
        let sol = solve_backward_2d(&p, &d, &FdGrid::Polar { radial: 16, angular: 32, steps: 16 }).unwrap();
        let nodes = sol.layout.nodes();
        for (j, level) in sol.values.iter().enumerate() {
            for (k, v) in level.iter().enumerate() {
                if d.in_cavity(sol.times[j], &nodes[k]) {
                    assert_eq!(*v, 0.0);
                }
                assert!(*v <= 1.0 + 1e-9 && *v >= -1e-9, "{v}");
            }
        }
    }

    #[test]
    fn polar_moving_cavity_self_convergence() {
        let p = disk_problem(0.5, 0.0, "1");
        let d = moving_cavity_domain();
        let g = FdGrid::Polar { radial: 10, angular: 32, steps: 20 };
        let probes = [[0.0, 0.3, 0.0], [0.4, 0.0, 0.0], [-0.3, -0.3, 0.0], [0.2, 0.5, 0.0]];
        let sols: Vec<FdSolution> =
            (0..3).map(|l| solve_backward_2d(&p, &d, &g.refined(1 << l)).unwrap()).collect();
        let gap = |a: &FdSolution, b: &FdSolution| {
            probes.iter().map(|x| (a.value_at(0.0, x) - b.value_at(0.0, x)).abs()).fold(0.0, f64::max)
        };
        let ratio = gap(&sols[0], &sols[1]) / gap(&sols[1], &sols[2]);
        assert!(ratio >= 2.0, "observed ratio {ratio}");
    }

    #[test]
    fn polar_static_cavity_approaches_steady_state() {
        let coeffs = CoefficientSet::isotropic(2, 0.5);
        let data = SourceData::new(Expr::constant(1.0), Expr::constant(0.0), Expr::constant(0.0));
        let p = Problem::new(coeffs, data, 4.0).unwrap();
        let cav = Cavity::fixed([0.0, -0.3, 0.0], 0.2).unwrap();
        let d = TimeVaryingDomain::new(FixedDomain::unit_disk_half_robin(), Some(cav), 4.0, 0.2).unwrap();
        let sol = solve_backward_2d(&p, &d, &FdGrid::Polar { radial: 12, angular: 32, steps: 40 }).unwrap();
        // Levels are in increasing t; τ = T − t grows towards the front.
        let rate: Vec<f64> = (1..sol.values.len())
            .map(|j| {
                sol.values[j - 1].iter().zip(&sol.values[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .collect();
        assert!(rate[0] < 5e-2 * rate[rate.len() - 2], "{} vs {}", rate[0], rate[rate.len() - 2]);
        for w in rate[..rate.len() - 4].windows(2) {
            assert!(w[0] <= w[1] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn anisotropic_disk_is_unsupported() {
        let coeffs = CoefficientSet::new(
            vec![vec![Expr::constant(1.0), Expr::constant(0.0)], vec![Expr::constant(0.0), Expr::constant(2.0)]],
            vec![Expr::constant(0.0); 2],
            vec![Expr::constant(0.0); 2],
            Expr::constant(0.0),
            Expr::constant(0.0),
        )
        .unwrap();
        let p = Problem::new(coeffs, SourceData::zero(), 1.0).unwrap();
        let d = TimeVaryingDomain::cylinder(FixedDomain::unit_disk_half_robin(), 1.0);
        let err = solve_backward_2d(&p, &d, &FdGrid::Polar { radial: 8, angular: 16, steps: 4 }).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn trace_of_constant_solution_is_constant() {
        let p = disk_problem(0.5, 0.0, "1");
        let base = FixedDomain::new(
            Shape::Disk { center: [0.0, 0.0], radius: 1.0 },
            Dissection::Arc { start: 0.0, end: TAU },
            0.5,
        )
        .unwrap();
        let d = TimeVaryingDomain::cylinder(base, 1.0);
        let sol = solve_backward_2d(&p, &d, &FdGrid::Polar { radial: 8, angular: 16, steps: 4 }).unwrap();
        let spec = ObservationSpec { arc: [0.3, 1.2], n_points: 5, n_times: 4 };
        let tr = trace_on_observation(&sol, &d, &spec).unwrap();
        assert!(tr.values.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let bad = ObservationSpec { arc: [0.3, 1.2], n_points: 0, n_times: 4 };
        assert!(trace_on_observation(&sol, &d, &bad).is_err());
    }

    #[test]
    fn autonomy_detection() {
        let (p, _) = calibration_1d();
        assert!(is_autonomous(&p));
        let q = p.with_data(SourceData::new(Expr::parse("t", 1).unwrap(), Expr::constant(0.0), Expr::constant(0.0)));
        assert!(!is_autonomous(&q));
    }
}
