//! Euler–Maruyama simulation of the conormally reflected diffusion with
//! boundary local time, stopped on entering the closed Dirichlet part.
//!
//! Along a path the weight `Z` accumulates `∫c dt + ∫γ dL`; the running
//! integrals `∫e^Z f dt` and `∫e^Z ψ dL` are frozen at the stop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axpy, distance, dot, norm, sub, BoundaryClass, Point, TimeVaryingDomain};
use crate::problem::{Mat3, Problem};
use crate::rng::path_rng;

/// Maximum number of step halvings after a collar escape.
pub const MAX_HALVINGS: u32 = 8;

/// Boundary tolerance for containment after a step.
const CONTAINMENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Reflect the proposal back along β by its overshoot.
    #[default]
    Projection,
    /// Also charge local time for Brownian-bridge excursions below the
    /// tangent half-space that the endpoints miss.
    Halfspace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop on the fixed Dirichlet part, at Π and on the cavity.
    #[default]
    Dirichlet,
    /// Reflect everywhere on Γ and ignore the cavity.
    ReflectOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub scheme: Scheme,
    pub master_seed: u64,
    /// Proposals deeper outside than this are retried with a halved step.
    pub collar_guard: f64,
    pub stop_rule: StopRule,
}

impl SimConfig {
    pub fn new(dt: f64, master_seed: u64) -> Self {
        Self { dt, scheme: Scheme::default(), master_seed, collar_guard: f64::INFINITY, stop_rule: StopRule::Dirichlet }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_stop_rule(mut self, rule: StopRule) -> Self {
        self.stop_rule = rule;
        self
    }

    pub fn with_collar_guard(mut self, guard: f64) -> Self {
        self.collar_guard = guard;
        self
    }

    /// Checks `4·sup|c⃗|·dt + 4·√(2·sup‖A‖·dt) ≤ collar width` on samples so
    /// that steps rarely overshoot the collar.
    pub fn check(&self, problem: &Problem, domain: &TimeVaryingDomain) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        let width = domain.base().tubular_width();
        let guard = self.collar_guard.min(width);
        let (sup_c, sup_a) = sup_drift_diffusion(problem, domain);
        let reach = 4.0 * sup_c * self.dt + 4.0 * (2.0 * sup_a * self.dt).sqrt();
        if reach > guard {
            return Err(Error::Config(format!(
                "dt = {} lets a step reach {reach:.3} outside, beyond the collar guard {guard}",
                self.dt
            )));
        }
        Ok(())
    }

    fn guard(&self, domain: &TimeVaryingDomain) -> f64 {
        self.collar_guard.min(domain.base().tubular_width())
    }
}

fn sup_drift_diffusion(problem: &Problem, domain: &TimeVaryingDomain) -> (f64, f64) {
    let nd = problem.nondiv();
    let base = domain.base();
    let r = base.radius();
    let dim = domain.dim();
    let mut sup_c: f64 = 0.0;
    let mut sup_a: f64 = 0.0;
    // deterministic lattice over the bounding box, kept inside Ω̄
    let n: usize = if dim == 1 { 64 } else { 16 };
    for k in 0..=8 {
        let t = problem.horizon() * k as f64 / 8.0;
        for idx in 0..n.pow(dim as u32) {
            let mut x = [0.0; 3];
            let mut rem = idx;
            for xi in x.iter_mut().take(dim) {
                *xi = -r + 2.0 * r * (rem % n) as f64 / (n - 1) as f64;
                rem /= n;
            }
            let x = shift_to_domain(domain, x);
            if base.signed_distance(&x) < 0.0 {
                continue;
            }
            sup_c = sup_c.max(norm(&nd.drift(t, &x)));
            let a = nd.diffusion(t, &x);
            let fro: f64 = a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            sup_a = sup_a.max(fro);
        }
    }
    (sup_c, sup_a)
}

fn shift_to_domain(domain: &TimeVaryingDomain, local: Point) -> Point {
    use crate::geometry::Shape;
    match *domain.base().shape() {
        Shape::Interval { a, b } => [local[0] + 0.5 * (a + b), 0.0, 0.0],
        Shape::Disk { center, .. } => [local[0] + center[0], local[1] + center[1], 0.0],
        Shape::Ball { center, .. } => [local[0] + center[0], local[1] + center[1], local[2] + center[2]],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Status {
    Running,
    StoppedDirichlet { tau: f64 },
    ReachedT,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathState {
    pub t: f64,
    pub x: Point,
    pub l: f64,
    pub z: f64,
    pub status: Status,
}

/// What happened during one (sub)step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepEvent {
    Interior,
    Reflection { xb: Point, dl: f64, class: BoundaryClass },
    /// Stopped on Γ″ or Π at a reflection.
    FixedDirichlet { xb: Point, class: BoundaryClass },
    /// Entered the cavity.
    Cavity,
}

/// Hooks into the path loop; the default methods do nothing.
pub trait Observer {
    /// Called after every (sub)step with the state before and after it.
    fn on_step(&mut self, _before: &PathState, _after: &PathState, _event: &StepEvent) {}
}

impl Observer for () {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub s: f64,
    pub x0: Point,
    /// τ ∧ T.
    pub stop_time: f64,
    /// Entered the closed Dirichlet part before (or at) T.
    pub stopped: bool,
    pub l_final: f64,
    pub z_final: f64,
    pub x_final: Point,
    /// ∫ e^Z f dt up to the stop.
    pub source_integral: f64,
    /// ∫ e^Z ψ dL up to the stop.
    pub robin_integral: f64,
    pub n_steps: u32,
    pub n_reflections: u32,
    /// Smallest distance to Π over reflection points (+∞ if none).
    pub min_pi_distance: f64,
    pub max_z: f64,
}

impl PathRecord {
    fn frozen(s: f64, x: Point, stopped: bool) -> Self {
        Self {
            s,
            x0: x,
            stop_time: s,
            stopped,
            l_final: 0.0,
            z_final: 0.0,
            x_final: x,
            source_integral: 0.0,
            robin_integral: 0.0,
            n_steps: 0,
            n_reflections: 0,
            min_pi_distance: f64::INFINITY,
            max_z: 0.0,
        }
    }
}

/// Running accumulators that travel with a path.
#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    source: f64,
    robin: f64,
    n_steps: u32,
    n_reflections: u32,
    min_pi: f64,
    max_z: f64,
}

/// `(e^y − 1)/y`, continuous at 0.
#[inline]
fn expm1_ratio(y: f64) -> f64 {
    if y.abs() < 1e-8 {
        1.0 + 0.5 * y
    } else {
        y.exp_m1() / y
    }
}

/// Product with a lower-triangular factor.
#[inline]
fn lower_mul(m: &Mat3, v: &Point, dim: usize) -> Point {
    let mut out = [0.0; 3];
    for i in 0..dim {
        for j in 0..=i {
            out[i] += m[i][j] * v[j];
        }
    }
    out
}

/// Reflects a proposal lying outside Ω̄ back along the conormal at its
/// nearest boundary point. Returns `(X_new, ΔL, X_b)`.
pub fn local_time_reflect(
    x_proposed: &Point,
    domain: &TimeVaryingDomain,
    problem: &Problem,
    t: f64,
) -> Result<(Point, f64, Point)> {
    let base = domain.base();
    let phi = base.signed_distance(x_proposed);
    let xb = base.project(x_proposed);
    let n = base.inward_normal(x_proposed);
    let beta = problem.nondiv().beta(t.min(problem.horizon()), &xb, &n);
    let bn = dot(&beta, &n);
    if !(bn > 0.0) {
        return Err(Error::NonInwardReflection(bn));
    }
    let dl = (-phi).max(0.0) / bn;
    let mut x_new = axpy(dl, &beta, x_proposed);
    if base.signed_distance(&x_new) < 0.0 {
        x_new = base.project(&x_new);
    }
    Ok((x_new, dl, xb))
}

/// Space-time entrance into the cavity along the straight segment between
/// two consecutive states; returns the interpolated entrance time.
pub fn cavity_crossing(t_prev: f64, x_prev: &Point, t_new: f64, x_new: &Point, domain: &TimeVaryingDomain) -> Option<f64> {
    domain.cavity()?;
    let gap = |s: f64| {
        let t = t_prev + s * (t_new - t_prev);
        let x = [
            x_prev[0] + s * (x_new[0] - x_prev[0]),
            x_prev[1] + s * (x_new[1] - x_prev[1]),
            x_prev[2] + s * (x_new[2] - x_prev[2]),
        ];
        match domain.cavity_at(t) {
            Some((c, r)) => distance(&x, &c) - r,
            None => f64::INFINITY,
        }
    };
    if gap(0.0) <= 0.0 {
        return Some(t_prev);
    }
    let bisect = |mut lo: f64, mut hi: f64| {
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if gap(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        t_prev + hi * (t_new - t_prev)
    };
    if gap(1.0) <= 0.0 {
        return Some(bisect(0.0, 1.0));
    }
    // the segment may pass through the cavity frozen at t_prev
    let (c, r) = domain.cavity_at(t_prev)?;
    let d = sub(x_new, x_prev);
    let w = sub(x_prev, &c);
    let dd = dot(&d, &d);
    if dd == 0.0 {
        return None;
    }
    let b = dot(&w, &d);
    let cc = dot(&w, &w) - r * r;
    let disc = b * b - dd * cc;
    if disc < 0.0 {
        return None;
    }
    let s = (-b - disc.sqrt()) / dd;
    if (0.0..=1.0).contains(&s) {
        Some(t_prev + s * (t_new - t_prev))
    } else {
        None
    }
}

/// Stop time for one step: a Dirichlet reflection stops at `t_new`,
/// otherwise a cavity entrance stops at the interpolated crossing.
pub fn dirichlet_stop_check(
    t_prev: f64,
    x_prev: &Point,
    t_new: f64,
    x_new: &Point,
    domain: &TimeVaryingDomain,
    reflection: Option<BoundaryClass>,
) -> Option<f64> {
    if matches!(reflection, Some(BoundaryClass::DirichletFixed | BoundaryClass::Pi)) {
        return Some(t_new);
    }
    cavity_crossing(t_prev, x_prev, t_new, x_new, domain)
}

/// One simulator bound to a problem, domain and configuration.
pub struct Simulator<'a> {
    problem: &'a Problem,
    domain: &'a TimeVaryingDomain,
    cfg: SimConfig,
    dim: usize,
    guard: f64,
    has_pi: bool,
}

impl<'a> Simulator<'a> {
    pub fn new(problem: &'a Problem, domain: &'a TimeVaryingDomain, cfg: SimConfig) -> Result<Self> {
        if problem.dim() != domain.dim() {
            return Err(Error::Config("problem and domain dimensions differ".into()));
        }
        if !(cfg.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", cfg.dt)));
        }
        let guard = cfg.guard(domain);
        Ok(Self { problem, domain, cfg, dim: domain.dim(), guard, has_pi: domain.base().has_pi() })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn horizon(&self) -> f64 {
        self.problem.horizon()
    }

    fn stops(&self) -> bool {
        self.cfg.stop_rule == StopRule::Dirichlet
    }

    /// Whether a start point lies in the closed Dirichlet part.
    pub fn starts_in_dirichlet(&self, s: f64, x: &Point) -> Result<bool> {
        if !self.stops() {
            return Ok(false);
        }
        let class = self.domain.classify_point(s, x)?;
        Ok(matches!(class, BoundaryClass::DirichletFixed | BoundaryClass::Pi) || self.domain.in_cavity(s, x))
    }

    /// Simulates one path from `(s, x)`. Path noise depends only on
    /// `(master_seed, point_index, path_index)`.
    pub fn simulate_path(&self, s: f64, x: &Point, point_index: u64, path_index: u64) -> Result<PathRecord> {
        self.simulate_path_observed(s, x, point_index, path_index, &mut ())
    }

    pub fn simulate_path_observed(
        &self,
        s: f64,
        x: &Point,
        point_index: u64,
        path_index: u64,
        obs: &mut dyn Observer,
    ) -> Result<PathRecord> {
        let horizon = self.horizon();
        if !(0.0..=horizon).contains(&s) {
            return Err(Error::Domain(format!("start time {s} outside [0, {horizon}]")));
        }
        if self.starts_in_dirichlet(s, x)? {
            return Ok(PathRecord::frozen(s, *x, true));
        }
        if self.domain.base().signed_distance(x) < -CONTAINMENT_TOL {
            return Err(Error::Domain(format!("start point {x:?} is outside the domain")));
        }
        if s >= horizon {
            return Ok(PathRecord::frozen(s, *x, false));
        }
        let mut rng = path_rng(self.cfg.master_seed, point_index, path_index);
        let mut st = PathState { t: s, x: *x, l: 0.0, z: 0.0, status: Status::Running };
        let mut acc = Accum { min_pi: f64::INFINITY, ..Accum::default() };
        while st.status == Status::Running {
            self.step(&mut st, &mut acc, &mut rng, obs)?;
        }
        let (stop_time, stopped) = match st.status {
            Status::StoppedDirichlet { tau } => (tau, true),
            _ => (st.t, false),
        };
        Ok(PathRecord {
            s,
            x0: *x,
            stop_time,
            stopped,
            l_final: st.l,
            z_final: st.z,
            x_final: st.x,
            source_integral: acc.source,
            robin_integral: acc.robin,
            n_steps: acc.n_steps,
            n_reflections: acc.n_reflections,
            min_pi_distance: acc.min_pi,
            max_z: acc.max_z,
        })
    }

    /// Advances a running state by one step of size `min(dt, T − t)`.
    pub fn step_state(&self, st: &mut PathState, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut acc = Accum { min_pi: f64::INFINITY, ..Accum::default() };
        self.step(st, &mut acc, rng, &mut ())
    }

    fn step(&self, st: &mut PathState, acc: &mut Accum, rng: &mut ChaCha8Rng, obs: &mut dyn Observer) -> Result<()> {
        let horizon = self.horizon();
        let dt = self.cfg.dt.min(horizon - st.t);
        let sq = dt.sqrt();
        let mut dw = [0.0; 3];
        for w in dw.iter_mut().take(self.dim) {
            *w = sq * rng.sample::<f64, _>(StandardNormal);
        }
        self.substep(st, acc, dt, dw, 0, rng, obs)?;
        if st.status == Status::Running && st.t >= horizon - 1e-14 * horizon.max(1.0) {
            st.t = horizon;
            st.status = Status::ReachedT;
        }
        Ok(())
    }

    /// Step with a given Brownian increment; on a collar escape the
    /// increment is split by a Brownian bridge and both halves are taken.
    #[allow(clippy::too_many_arguments)]
    fn substep(
        &self,
        st: &mut PathState,
        acc: &mut Accum,
        dt: f64,
        dw: Point,
        depth: u32,
        rng: &mut ChaCha8Rng,
        obs: &mut dyn Observer,
    ) -> Result<()> {
        let base = self.domain.base();
        let nd = self.problem.nondiv();
        let t = st.t;
        let tc = t.min(self.horizon());
        let c = nd.drift(tc, &st.x);
        let m = nd.factor(tc, &st.x)?;
        let noise = lower_mul(&m, &dw, self.dim);
        let mut xp = st.x;
        for i in 0..self.dim {
            xp[i] += c[i] * dt + noise[i];
        }
        let phi_p = base.signed_distance(&xp);
        if phi_p < -self.guard {
            if depth >= MAX_HALVINGS {
                return Err(Error::CollarEscape { halvings: depth });
            }
            let half = 0.5 * dt;
            let sd = 0.5 * dt.sqrt();
            let mut first = [0.0; 3];
            for i in 0..self.dim {
                first[i] = 0.5 * dw[i] + sd * rng.sample::<f64, _>(StandardNormal);
            }
            let second = sub(&dw, &first);
            self.substep(st, acc, half, first, depth + 1, rng, obs)?;
            if st.status == Status::Running {
                self.substep(st, acc, half, second, depth + 1, rng, obs)?;
            }
            return Ok(());
        }

        let before = *st;
        let t_new = t + dt;
        let reflection = match self.cfg.scheme {
            Scheme::Projection => {
                if phi_p >= 0.0 {
                    None
                } else {
                    let (x_new, dl, xb) = local_time_reflect(&xp, self.domain, self.problem, t_new)?;
                    xp = x_new;
                    Some((xb, dl))
                }
            }
            Scheme::Halfspace => self.halfspace_push(&st.x, &mut xp, t_new, dt, rng)?,
        };

        let mut event = StepEvent::Interior;
        let mut stop: Option<f64> = None;
        let mut robin_at: Option<(Point, f64)> = None;
        if let Some((xb, dl)) = reflection {
            let class = self.domain.classify_boundary(&xb);
            if self.has_pi {
                acc.min_pi = acc.min_pi.min(base.dist_to_pi(&xb));
            }
            if self.stops() && matches!(class, BoundaryClass::DirichletFixed | BoundaryClass::Pi) {
                stop = Some(t_new);
                xp = xb;
                event = StepEvent::FixedDirichlet { xb, class };
            } else {
                robin_at = Some((xb, dl));
                event = StepEvent::Reflection { xb, dl, class };
            }
        }
        if stop.is_none() && self.stops() {
            if let Some(tau) = cavity_crossing(t, &st.x, t_new, &xp, self.domain) {
                stop = Some(tau);
                event = StepEvent::Cavity;
                robin_at = None;
            } else if self.cfg.scheme == Scheme::Halfspace && self.cavity_bridge_hit(&st.x, t, &xp, t_new, dt, rng) {
                stop = Some(t + 0.5 * dt);
                event = StepEvent::Cavity;
                robin_at = None;
            }
        }

        let elapsed = stop.map_or(dt, |tau| tau - t);
        let ez = st.z.exp();
        acc.source += ez * self.problem.f(t, &st.x) * elapsed;
        st.z += nd.c_scal(tc, &st.x) * elapsed;
        if let Some((xb, dl)) = robin_at {
            let n = base.inward_normal(&xb);
            let tr = t_new.min(self.horizon());
            let g = nd.gamma(tr, &xb, &n);
            let psi = self.problem.psi(t_new, &xb);
            if psi != 0.0 {
                acc.robin += st.z.exp() * psi * dl * expm1_ratio(g * dl);
            }
            st.z += g * dl;
            st.l += dl;
            acc.n_reflections += 1;
        }
        acc.max_z = acc.max_z.max(st.z);
        acc.n_steps += 1;
        st.x = xp;
        match stop {
            Some(tau) => {
                st.t = tau;
                st.status = Status::StoppedDirichlet { tau };
            }
            None => st.t = t_new,
        }
        obs.on_step(&before, st, &event);
        Ok(())
    }

    /// Halfspace scheme: local time from the Brownian-bridge minimum of the
    /// normal coordinate relative to the tangent plane at the start point.
    fn halfspace_push(
        &self,
        x0: &Point,
        xp: &mut Point,
        t_new: f64,
        dt: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<(Point, f64)>> {
        let base = self.domain.base();
        let nd = self.problem.nondiv();
        let phi0 = base.signed_distance(x0);
        let phi_p = base.signed_distance(xp);
        let n0 = base.inward_normal(x0);
        let tc = t_new.min(self.horizon());
        let a = nd.diffusion(tc, x0);
        let an = mat_vec_full(&a, &n0);
        let var = 2.0 * dot(&n0, &an) * dt;
        if phi_p >= 0.0 && phi0 >= 6.0 * var.sqrt() {
            return Ok(None);
        }
        let dn = dot(&n0, &sub(xp, x0));
        let u: f64 = 1.0 - rng.random::<f64>();
        let minimum = 0.5 * (dn - (dn * dn - 2.0 * var * u.ln()).sqrt());
        let push = (-(phi0 + minimum)).max(0.0).max(-phi_p);
        if push <= 0.0 {
            return Ok(None);
        }
        let mid = [0.5 * (x0[0] + xp[0]), 0.5 * (x0[1] + xp[1]), 0.5 * (x0[2] + xp[2])];
        let xb = if phi_p < 0.0 { base.project(xp) } else { base.project(&mid) };
        let nb = base.inward_normal(&xb);
        let beta = nd.beta(tc, &xb, &nb);
        let bn = dot(&beta, &nb);
        if !(bn > 0.0) {
            return Err(Error::NonInwardReflection(bn));
        }
        let dl = push / bn;
        *xp = axpy(dl, &beta, xp);
        if base.signed_distance(xp) < 0.0 {
            *xp = base.project(xp);
        }
        Ok(Some((xb, dl)))
    }

    /// Probability that a Brownian bridge between two outside points dips
    /// into the cavity, using the local half-space approximation.
    fn cavity_bridge_hit(&self, x0: &Point, t0: f64, x1: &Point, t1: f64, dt: f64, rng: &mut ChaCha8Rng) -> bool {
        let (Some((c0, r0)), Some((c1, r1))) = (self.domain.cavity_at(t0), self.domain.cavity_at(t1)) else {
            return false;
        };
        let d0 = distance(x0, &c0) - r0;
        let d1 = distance(x1, &c1) - r1;
        if d0 <= 0.0 || d1 <= 0.0 {
            return false;
        }
        let to_c = sub(x0, &c0);
        let len = norm(&to_c);
        if len == 0.0 {
            return false;
        }
        let nc = [to_c[0] / len, to_c[1] / len, to_c[2] / len];
        let a = self.problem.nondiv().diffusion(t0.min(self.horizon()), x0);
        let var = 2.0 * dot(&nc, &mat_vec_full(&a, &nc)) * dt;
        if d0.min(d1) > 6.0 * var.sqrt() {
            return false;
        }
        let p = (-2.0 * d0 * d1 / var).exp();
        rng.random::<f64>() < p
    }
}

#[inline]
fn mat_vec_full(a: &Mat3, v: &Point) -> Point {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Records each (sub)step as a trace row.
#[derive(Debug, Default, Clone)]
pub struct TraceRecorder {
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub x: Point,
    pub l: f64,
    pub z: f64,
    pub event: &'static str,
}

impl Observer for TraceRecorder {
    fn on_step(&mut self, before: &PathState, after: &PathState, event: &StepEvent) {
        if self.rows.is_empty() {
            self.rows.push(TraceRow { t: before.t, x: before.x, l: before.l, z: before.z, event: "start" });
        }
        let name = match event {
            StepEvent::Interior => "step",
            StepEvent::Reflection { .. } => "reflect",
            StepEvent::FixedDirichlet { .. } => "stop_fixed",
            StepEvent::Cavity => "stop_cavity",
        };
        self.rows.push(TraceRow { t: after.t, x: after.x, l: after.l, z: after.z, event: name });
    }
}
