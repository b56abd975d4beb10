//! Fixed domain, boundary dissection and the time-varying domain with a
//! moving ball cavity.
//!
//! Points are `[f64; 3]` padded with zeros beyond the spatial dimension.
//! The fixed domain is an interval, disk or ball so that signed distance,
//! nearest boundary point and inward normal are closed-form.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Default tolerance for classifying a boundary point as lying on Π,
/// measured in shape-local coordinates (radians for disk and ball).
pub const DEFAULT_TOL_PI: f64 = 1e-9;

/// Distance below which a point counts as lying on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-12;

#[inline]
pub fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: &Point) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn axpy(a: f64, x: &Point, y: &Point) -> Point {
    [y[0] + a * x[0], y[1] + a * x[1], y[2] + a * x[2]]
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    norm(&sub(a, b))
}

/// Builds a padded point from a coordinate slice.
pub fn point(coords: &[f64]) -> Point {
    let mut p = [0.0; 3];
    for (dst, src) in p.iter_mut().zip(coords) {
        *dst = *src;
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndCondition {
    Robin,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Interval { a: f64, b: f64 },
    Disk { center: [f64; 2], radius: f64 },
    Ball { center: [f64; 3], radius: f64 },
}

/// Assignment of Γ into the Robin part Γ′, the fixed Dirichlet part Γ″
/// and their common border Π.
#[derive(Debug, Clone, PartialEq)]
pub enum Dissection {
    /// Condition at each end of an interval; Π is empty.
    Ends { left: EndCondition, right: EndCondition },
    /// Robin arc running counterclockwise from `start` to `end` (radians).
    /// A span of 2π or more makes the whole circle Robin.
    Arc { start: f64, end: f64 },
    /// Robin cap: boundary points whose angle to `axis` is below
    /// `half_angle`. Π is the circle at exactly `half_angle`.
    Cap { axis: [f64; 3], half_angle: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryClass {
    Robin,
    DirichletFixed,
    Pi,
    Interior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedDomain {
    shape: Shape,
    dissection: Dissection,
    tubular_width: f64,
}

impl FixedDomain {
    pub fn new(shape: Shape, dissection: Dissection, tubular_width: f64) -> Result<Self> {
        let ok = matches!(
            (&shape, &dissection),
            (Shape::Interval { .. }, Dissection::Ends { .. })
                | (Shape::Disk { .. }, Dissection::Arc { .. })
                | (Shape::Ball { .. }, Dissection::Cap { .. })
        );
        if !ok {
            return Err(Error::Domain("dissection does not match the shape".into()));
        }
        match &shape {
            Shape::Interval { a, b } if !(a < b) => {
                return Err(Error::Domain(format!("empty interval ({a}, {b})")))
            }
            Shape::Disk { radius, .. } | Shape::Ball { radius, .. } if !(*radius > 0.0) => {
                return Err(Error::Domain("radius must be positive".into()))
            }
            _ => {}
        }
        if let Dissection::Cap { axis, half_angle } = &dissection {
            if norm(axis) == 0.0 || !(0.0..=PI).contains(half_angle) {
                return Err(Error::Domain("cap needs a nonzero axis and half angle in [0, pi]".into()));
            }
        }
        if !(tubular_width > 0.0) {
            return Err(Error::Domain("tubular width must be positive".into()));
        }
        Ok(Self { shape, dissection, tubular_width })
    }

    pub fn unit_interval(left: EndCondition, right: EndCondition) -> Self {
        Self::new(Shape::Interval { a: 0.0, b: 1.0 }, Dissection::Ends { left, right }, 0.5)
            .expect("valid unit interval")
    }

    /// Unit disk at the origin with Robin upper semicircle and Dirichlet
    /// lower semicircle.
    pub fn unit_disk_half_robin() -> Self {
        Self::new(
            Shape::Disk { center: [0.0, 0.0], radius: 1.0 },
            Dissection::Arc { start: 0.0, end: PI },
            0.5,
        )
        .expect("valid unit disk")
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dissection(&self) -> &Dissection {
        &self.dissection
    }

    pub fn tubular_width(&self) -> f64 {
        self.tubular_width
    }

    pub fn dim(&self) -> usize {
        match self.shape {
            Shape::Interval { .. } => 1,
            Shape::Disk { .. } => 2,
            Shape::Ball { .. } => 3,
        }
    }

    fn center(&self) -> Point {
        match self.shape {
            Shape::Interval { a, b } => [(a + b) / 2.0, 0.0, 0.0],
            Shape::Disk { center, .. } => [center[0], center[1], 0.0],
            Shape::Ball { center, .. } => center,
        }
    }

    /// Radius of the disk/ball, half-length for the interval.
    pub fn radius(&self) -> f64 {
        match self.shape {
            Shape::Interval { a, b } => (b - a) / 2.0,
            Shape::Disk { radius, .. } | Shape::Ball { radius, .. } => radius,
        }
    }

    /// Signed distance to Γ, positive inside. Closed-form, no collar check.
    #[inline]
    pub fn signed_distance(&self, x: &Point) -> f64 {
        match self.shape {
            Shape::Interval { a, b } => (x[0] - a).min(b - x[0]),
            _ => self.radius() - distance(x, &self.center()),
        }
    }

    /// Inward unit normal at the boundary point nearest to `x`.
    #[inline]
    pub fn inward_normal(&self, x: &Point) -> Point {
        match self.shape {
            Shape::Interval { a, b } => {
                if x[0] - a <= b - x[0] {
                    [1.0, 0.0, 0.0]
                } else {
                    [-1.0, 0.0, 0.0]
                }
            }
            _ => {
                let c = self.center();
                let d = sub(x, &c);
                let r = norm(&d);
                if r == 0.0 {
                    // every boundary point is nearest; pick the one on +x1
                    return [-1.0, 0.0, 0.0];
                }
                [-d[0] / r, -d[1] / r, -d[2] / r]
            }
        }
    }

    /// Nearest point of Γ.
    #[inline]
    pub fn project(&self, x: &Point) -> Point {
        match self.shape {
            Shape::Interval { a, b } => {
                if x[0] - a <= b - x[0] {
                    [a, 0.0, 0.0]
                } else {
                    [b, 0.0, 0.0]
                }
            }
            _ => {
                let n = self.inward_normal(x);
                let c = self.center();
                axpy(-self.radius(), &n, &c)
            }
        }
    }

    /// Signed distance and inward normal; fails deeper outside than the collar.
    pub fn signed_distance_and_normal(&self, x: &Point) -> Result<(f64, Point)> {
        let phi = self.signed_distance(x);
        if phi < -self.tubular_width {
            return Err(Error::Collar { distance: phi, width: self.tubular_width });
        }
        Ok((phi, self.inward_normal(x)))
    }

    /// Signed boundary coordinate of a boundary point: distance to Π in
    /// shape-local units, positive on Γ′, negative on Γ″, ±∞ when Π is empty.
    pub fn robin_coordinate(&self, xb: &Point) -> f64 {
        match (&self.shape, &self.dissection) {
            (Shape::Interval { a, b }, Dissection::Ends { left, right }) => {
                let cond = if xb[0] - a <= b - xb[0] { left } else { right };
                match cond {
                    EndCondition::Robin => f64::INFINITY,
                    EndCondition::Dirichlet => f64::NEG_INFINITY,
                }
            }
            (Shape::Disk { .. }, Dissection::Arc { start, end }) => {
                let span = end - start;
                if span >= TAU {
                    return f64::INFINITY;
                }
                if span <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let c = self.center();
                let ang = (xb[1] - c[1]).atan2(xb[0] - c[0]);
                let off = (ang - start).rem_euclid(TAU);
                if off <= span {
                    off.min(span - off)
                } else {
                    -(off - span).min(TAU - off)
                }
            }
            (Shape::Ball { .. }, Dissection::Cap { axis, half_angle }) => {
                if *half_angle >= PI {
                    return f64::INFINITY;
                }
                if *half_angle <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                half_angle - self.cap_angle(xb, axis)
            }
            _ => unreachable!("validated on construction"),
        }
    }

    fn cap_angle(&self, x: &Point, axis: &Point) -> f64 {
        let d = sub(x, &self.center());
        let r = norm(&d);
        if r == 0.0 {
            return 0.0;
        }
        (dot(&d, axis) / (r * norm(axis))).clamp(-1.0, 1.0).acos()
    }

    /// Whether Π is nonempty.
    pub fn has_pi(&self) -> bool {
        match &self.dissection {
            Dissection::Ends { .. } => false,
            Dissection::Arc { start, end } => {
                let span = end - start;
                span > 0.0 && span < TAU
            }
            Dissection::Cap { half_angle, .. } => *half_angle > 0.0 && *half_angle < PI,
        }
    }

    /// Points of Π for the disk (two arc endpoints).
    fn arc_pi_points(&self) -> Option<[Point; 2]> {
        match (&self.shape, &self.dissection) {
            (Shape::Disk { center, radius }, Dissection::Arc { start, end }) if self.has_pi() => Some([
                [center[0] + radius * start.cos(), center[1] + radius * start.sin(), 0.0],
                [center[0] + radius * end.cos(), center[1] + radius * end.sin(), 0.0],
            ]),
            _ => None,
        }
    }

    /// Euclidean distance from `x` to Π (+∞ when Π is empty).
    pub fn dist_to_pi(&self, x: &Point) -> f64 {
        if !self.has_pi() {
            return f64::INFINITY;
        }
        match (&self.shape, &self.dissection) {
            (Shape::Disk { .. }, _) => {
                let [p, q] = self.arc_pi_points().expect("pi exists");
                distance(x, &p).min(distance(x, &q))
            }
            (Shape::Ball { radius, .. }, Dissection::Cap { axis, half_angle }) => {
                let (z, rho) = self.axial_radial(x, axis);
                let dz = z - radius * half_angle.cos();
                let dr = rho - radius * half_angle.sin();
                (dz * dz + dr * dr).sqrt()
            }
            _ => f64::INFINITY,
        }
    }

    fn axial_radial(&self, x: &Point, axis: &Point) -> (f64, f64) {
        let a = norm(axis);
        let u = [axis[0] / a, axis[1] / a, axis[2] / a];
        let d = sub(x, &self.center());
        let z = dot(&d, &u);
        let rho = (dot(&d, &d) - z * z).max(0.0).sqrt();
        (z, rho)
    }

    /// Euclidean distance from `x` to the closure of Γ″ (+∞ when empty).
    pub fn dist_to_fixed_dirichlet(&self, x: &Point) -> f64 {
        match (&self.shape, &self.dissection) {
            (Shape::Interval { a, b }, Dissection::Ends { left, right }) => {
                let mut d = f64::INFINITY;
                if *left == EndCondition::Dirichlet {
                    d = d.min((x[0] - a).abs());
                }
                if *right == EndCondition::Dirichlet {
                    d = d.min((x[0] - b).abs());
                }
                d
            }
            (Shape::Disk { radius, .. }, Dissection::Arc { start, end }) => {
                let span = end - start;
                if span >= TAU {
                    return f64::INFINITY;
                }
                let c = self.center();
                let r = distance(x, &c);
                if span <= 0.0 || r == 0.0 {
                    return (r - radius).abs();
                }
                let ang = (x[1] - c[1]).atan2(x[0] - c[0]);
                let off = (ang - start).rem_euclid(TAU);
                if off >= span {
                    (r - radius).abs()
                } else {
                    self.dist_to_pi(x)
                }
            }
            (Shape::Ball { radius, .. }, Dissection::Cap { axis, half_angle }) => {
                if *half_angle >= PI {
                    return f64::INFINITY;
                }
                let r = distance(x, &self.center());
                if *half_angle <= 0.0 || r == 0.0 {
                    return (r - radius).abs();
                }
                if self.cap_angle(x, axis) >= *half_angle {
                    (r - radius).abs()
                } else {
                    self.dist_to_pi(x)
                }
            }
            _ => unreachable!("validated on construction"),
        }
    }

    /// Samples of the closure of Γ″, `n` points per connected piece.
    pub fn sample_fixed_dirichlet(&self, n: usize) -> Vec<Point> {
        let n = n.max(2);
        match (&self.shape, &self.dissection) {
            (Shape::Interval { a, b }, Dissection::Ends { left, right }) => {
                let mut out = Vec::new();
                if *left == EndCondition::Dirichlet {
                    out.push([*a, 0.0, 0.0]);
                }
                if *right == EndCondition::Dirichlet {
                    out.push([*b, 0.0, 0.0]);
                }
                out
            }
            (Shape::Disk { center, radius }, Dissection::Arc { start, end }) => {
                let span = end - start;
                if span >= TAU {
                    return Vec::new();
                }
                let (from, len) = if span <= 0.0 { (0.0, TAU) } else { (*end, TAU - span) };
                (0..n)
                    .map(|k| {
                        let a = from + len * k as f64 / (n - 1) as f64;
                        [center[0] + radius * a.cos(), center[1] + radius * a.sin(), 0.0]
                    })
                    .collect()
            }
            (Shape::Ball { radius, .. }, Dissection::Cap { axis, half_angle }) => {
                if *half_angle >= PI {
                    return Vec::new();
                }
                let c = self.center();
                let mut pts: Vec<Point> = fibonacci_sphere(4 * n)
                    .into_iter()
                    .map(|u| axpy(*radius, &u, &c))
                    .filter(|p| self.cap_angle(p, axis) >= *half_angle)
                    .collect();
                pts.extend(self.pi_circle(n));
                pts
            }
            _ => unreachable!("validated on construction"),
        }
    }

    fn pi_circle(&self, n: usize) -> Vec<Point> {
        let (Shape::Ball { radius, .. }, Dissection::Cap { axis, half_angle }) = (&self.shape, &self.dissection)
        else {
            return Vec::new();
        };
        let a = norm(axis);
        let u = [axis[0] / a, axis[1] / a, axis[2] / a];
        let (e1, e2) = orthonormal_complement(&u);
        let c = self.center();
        (0..n)
            .map(|k| {
                let phi = TAU * k as f64 / n as f64;
                let mut p = axpy(radius * half_angle.cos(), &u, &c);
                p = axpy(radius * half_angle.sin() * phi.cos(), &e1, &p);
                axpy(radius * half_angle.sin() * phi.sin(), &e2, &p)
            })
            .collect()
    }

    /// Boundary point for an arc parameter: the angle on a disk, the
    /// coordinate of an endpoint on an interval.
    pub fn boundary_point(&self, param: f64) -> Result<Point> {
        match self.shape {
            Shape::Interval { a, b } => {
                if (param - a).abs() < 1e-12 || (param - b).abs() < 1e-12 {
                    Ok([param, 0.0, 0.0])
                } else {
                    Err(Error::Domain(format!("{param} is not an interval endpoint")))
                }
            }
            Shape::Disk { center, radius } => {
                Ok([center[0] + radius * param.cos(), center[1] + radius * param.sin(), 0.0])
            }
            Shape::Ball { .. } => Err(Error::Unsupported("arc parameters on a ball boundary".into())),
        }
    }

    /// Inverse of [`FixedDomain::boundary_point`].
    pub fn boundary_param(&self, xb: &Point) -> f64 {
        match self.shape {
            Shape::Interval { a, b } => {
                if xb[0] - a <= b - xb[0] {
                    a
                } else {
                    b
                }
            }
            Shape::Disk { center, .. } => (xb[1] - center[1]).atan2(xb[0] - center[0]),
            Shape::Ball { .. } => f64::NAN,
        }
    }
}

fn orthonormal_complement(u: &Point) -> (Point, Point) {
    let helper = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let proj = dot(&helper, u);
    let e1 = axpy(-proj, u, &helper);
    let n1 = norm(&e1);
    let e1 = [e1[0] / n1, e1[1] / n1, e1[2] / n1];
    let e2 = [
        u[1] * e1[2] - u[2] * e1[1],
        u[2] * e1[0] - u[0] * e1[2],
        u[0] * e1[1] - u[1] * e1[0],
    ];
    (e1, e2)
}

fn fibonacci_sphere(n: usize) -> Vec<Point> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let th = golden * k as f64;
            [r * th.cos(), r * th.sin(), z]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub t: f64,
    pub center: Point,
    pub radius: f64,
}

/// Closed ball K(t) with piecewise-linear center and radius, frozen
/// outside the keyframe range.
#[derive(Debug, Clone, PartialEq)]
pub struct Cavity {
    keyframes: Vec<Keyframe>,
    center_lipschitz: f64,
    radius_lipschitz: f64,
}

impl Cavity {
    pub fn new(mut keyframes: Vec<Keyframe>) -> Result<Self> {
        if keyframes.is_empty() {
            return Err(Error::Domain("cavity needs at least one keyframe".into()));
        }
        keyframes.sort_by(|a, b| a.t.total_cmp(&b.t));
        if keyframes.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::Domain("cavity keyframe times must be distinct".into()));
        }
        if keyframes.iter().any(|k| !(k.radius >= 0.0) || !k.t.is_finite()) {
            return Err(Error::Domain("cavity radius must be nonnegative".into()));
        }
        let mut lc: f64 = 0.0;
        let mut lr: f64 = 0.0;
        for w in keyframes.windows(2) {
            let dt = w[1].t - w[0].t;
            lc = lc.max(distance(&w[1].center, &w[0].center) / dt);
            lr = lr.max((w[1].radius - w[0].radius).abs() / dt);
        }
        Ok(Self { keyframes, center_lipschitz: lc, radius_lipschitz: lr })
    }

    /// A cavity that does not move.
    pub fn fixed(center: Point, radius: f64) -> Result<Self> {
        Self::new(vec![Keyframe { t: 0.0, center, radius }])
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn lipschitz(&self) -> (f64, f64) {
        (self.center_lipschitz, self.radius_lipschitz)
    }

    pub fn is_static(&self) -> bool {
        self.center_lipschitz == 0.0 && self.radius_lipschitz == 0.0
    }

    #[inline]
    pub fn at(&self, t: f64) -> (Point, f64) {
        let k = &self.keyframes;
        if k.len() == 1 || t <= k[0].t {
            return (k[0].center, k[0].radius);
        }
        let last = k[k.len() - 1];
        if t >= last.t {
            return (last.center, last.radius);
        }
        let i = k.partition_point(|kf| kf.t <= t) - 1;
        let (a, b) = (k[i], k[i + 1]);
        let w = (t - a.t) / (b.t - a.t);
        let c = [
            a.center[0] + w * (b.center[0] - a.center[0]),
            a.center[1] + w * (b.center[1] - a.center[1]),
            a.center[2] + w * (b.center[2] - a.center[2]),
        ];
        (c, a.radius + w * (b.radius - a.radius))
    }
}

/// D = Ω \ K(t) over [0, T]; Dirichlet parts Σ₁ = [0,T]×Γ″ and Σ₂ = ∂K.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeVaryingDomain {
    base: FixedDomain,
    cavity: Option<Cavity>,
    horizon: f64,
    margin: f64,
    tol_pi: f64,
}

impl TimeVaryingDomain {
    pub fn new(base: FixedDomain, cavity: Option<Cavity>, horizon: f64, margin: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::Domain("horizon T must be positive".into()));
        }
        if !(margin >= 0.0) {
            return Err(Error::Domain("margin must be nonnegative".into()));
        }
        if let Some(cav) = &cavity {
            // Distance from K(t) to Γ is concave along linear keyframe
            // segments, so checking keyframes covers all t.
            for kf in cav.keyframes() {
                if kf.radius == 0.0 {
                    continue;
                }
                let gap = cavity_gap(&base, &kf.center, kf.radius);
                if gap < margin || gap <= 0.0 {
                    return Err(Error::Domain(format!(
                        "cavity at t={} is {gap:.4} from the boundary, below margin {margin}",
                        kf.t
                    )));
                }
            }
        }
        Ok(Self { base, cavity, horizon, margin, tol_pi: DEFAULT_TOL_PI })
    }

    /// Cylindrical domain without a cavity.
    pub fn cylinder(base: FixedDomain, horizon: f64) -> Self {
        Self::new(base, None, horizon, 0.0).expect("cylinder is always valid")
    }

    pub fn with_tol_pi(mut self, tol: f64) -> Self {
        self.tol_pi = tol;
        self
    }

    pub fn base(&self) -> &FixedDomain {
        &self.base
    }

    pub fn cavity(&self) -> Option<&Cavity> {
        self.cavity.as_ref()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn tol_pi(&self) -> f64 {
        self.tol_pi
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// K(t) as (center, radius); `None` when there is no cavity at `t`.
    #[inline]
    pub fn cavity_at(&self, t: f64) -> Option<(Point, f64)> {
        let cav = self.cavity.as_ref()?;
        let (c, r) = cav.at(t.min(self.horizon));
        (r > 0.0).then_some((c, r))
    }

    pub fn in_cavity(&self, t: f64, x: &Point) -> bool {
        match self.cavity_at(t) {
            Some((c, r)) => distance(x, &c) <= r,
            None => false,
        }
    }

    pub fn classify_point(&self, _t: f64, x: &Point) -> Result<BoundaryClass> {
        let phi = self.base.signed_distance(x);
        if phi < -BOUNDARY_TOL.max(1e-9 * self.base.radius()) {
            return Err(Error::Domain(format!("point {x:?} lies outside the closed domain")));
        }
        if phi > BOUNDARY_TOL {
            return Ok(BoundaryClass::Interior);
        }
        Ok(self.classify_boundary(&self.base.project(x)))
    }

    /// Classification of a point already on Γ.
    #[inline]
    pub fn classify_boundary(&self, xb: &Point) -> BoundaryClass {
        let s = self.base.robin_coordinate(xb);
        if s.abs() <= self.tol_pi {
            BoundaryClass::Pi
        } else if s > 0.0 {
            BoundaryClass::Robin
        } else {
            BoundaryClass::DirichletFixed
        }
    }

    /// x ∈ D(t): strictly inside Ω and outside the closed cavity.
    pub fn inside(&self, t: f64, x: &Point) -> bool {
        self.base.signed_distance(x) > 0.0 && !self.in_cavity(t, x)
    }

    pub fn signed_distance_and_normal(&self, x: &Point) -> Result<(f64, Point)> {
        self.base.signed_distance_and_normal(x)
    }

    /// Distance in space from `x` to Γ″ ∪ ∂K(t); +∞ when both are empty.
    pub fn dist_to_dirichlet(&self, t: f64, x: &Point) -> f64 {
        let mut d = self.base.dist_to_fixed_dirichlet(x);
        if let Some((c, r)) = self.cavity_at(t) {
            d = d.min((distance(x, &c) - r).abs());
        }
        d
    }

    /// Dense space-time samples of the closed Dirichlet part.
    pub fn sample_dirichlet(&self, sampling: &HausdorffSampling) -> Vec<[f64; 4]> {
        let nt = sampling.time_steps.max(1);
        let fixed = self.base.sample_fixed_dirichlet(sampling.points_per_component);
        let mut out = Vec::new();
        for k in 0..=nt {
            let t = self.horizon * k as f64 / nt as f64;
            for p in &fixed {
                out.push([t, p[0], p[1], p[2]]);
            }
            if let Some((c, r)) = self.cavity_at(t) {
                for p in sphere_samples(self.dim(), &c, r, sampling.points_per_component) {
                    out.push([t, p[0], p[1], p[2]]);
                }
            }
        }
        out
    }

    /// Minimum distance from the cavity to Γ and to Π over the keyframes.
    pub fn cavity_margins(&self) -> Option<(f64, f64)> {
        let cav = self.cavity.as_ref()?;
        let mut to_gamma = f64::INFINITY;
        let mut to_pi = f64::INFINITY;
        for kf in cav.keyframes().iter().filter(|k| k.radius > 0.0) {
            to_gamma = to_gamma.min(cavity_gap(&self.base, &kf.center, kf.radius));
            to_pi = to_pi.min(self.base.dist_to_pi(&kf.center) - kf.radius);
        }
        // Between keyframes the distance to Π can dip below the keyframe
        // values; sample the segments.
        for w in cav.keyframes().windows(2) {
            for j in 1..32 {
                let t = w[0].t + (w[1].t - w[0].t) * j as f64 / 32.0;
                let (c, r) = cav.at(t);
                if r > 0.0 {
                    to_pi = to_pi.min(self.base.dist_to_pi(&c) - r);
                }
            }
        }
        Some((to_gamma, to_pi))
    }

    /// In 1D a cavity splits the interval into two pieces.
    pub fn disconnects(&self) -> bool {
        self.dim() == 1 && self.cavity.as_ref().is_some_and(|c| c.keyframes().iter().any(|k| k.radius > 0.0))
    }
}

fn cavity_gap(base: &FixedDomain, center: &Point, radius: f64) -> f64 {
    base.signed_distance(center) - radius
}

fn sphere_samples(dim: usize, c: &Point, r: f64, n: usize) -> Vec<Point> {
    match dim {
        1 => vec![[c[0] - r, 0.0, 0.0], [c[0] + r, 0.0, 0.0]],
        2 => (0..n)
            .map(|k| {
                let a = TAU * k as f64 / n as f64;
                [c[0] + r * a.cos(), c[1] + r * a.sin(), 0.0]
            })
            .collect(),
        _ => fibonacci_sphere(n).into_iter().map(|u| axpy(r, &u, c)).collect(),
    }
}

/// Resolution of the space-time sampling used for Hausdorff distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HausdorffSampling {
    pub points_per_component: usize,
    pub time_steps: usize,
}

impl Default for HausdorffSampling {
    fn default() -> Self {
        Self { points_per_component: 256, time_steps: 128 }
    }
}

/// Symmetric Hausdorff distance between the sampled closed Dirichlet parts
/// of two domains, measured in space-time.
pub fn hausdorff_distance(
    a: &TimeVaryingDomain,
    b: &TimeVaryingDomain,
    sampling: &HausdorffSampling,
) -> Result<f64> {
    let sa = a.sample_dirichlet(sampling);
    let sb = b.sample_dirichlet(sampling);
    hausdorff_between(&sa, &sb)
}

/// Symmetric Hausdorff distance between two finite point sets in ℝ⁴.
pub fn hausdorff_between(a: &[[f64; 4]], b: &[[f64; 4]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("Hausdorff distance of an empty Dirichlet part".into()));
    }
    let ta = KdTree::build(a);
    let tb = KdTree::build(b);
    let ab = a.iter().map(|p| tb.nearest(p)).fold(0.0, f64::max);
    let ba = b.iter().map(|p| ta.nearest(p)).fold(0.0, f64::max);
    Ok(ab.max(ba).sqrt())
}

/// Static kd-tree over 4-vectors; stores squared distances internally.
struct KdTree {
    pts: Vec<[f64; 4]>,
}

impl KdTree {
    fn build(points: &[[f64; 4]]) -> Self {
        let mut pts = points.to_vec();
        Self::split(&mut pts, 0);
        Self { pts }
    }

    fn split(pts: &mut [[f64; 4]], depth: usize) {
        if pts.len() <= 1 {
            return;
        }
        let axis = depth % 4;
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |p, q| p[axis].total_cmp(&q[axis]));
        let (lo, hi) = pts.split_at_mut(mid);
        Self::split(lo, depth + 1);
        Self::split(&mut hi[1..], depth + 1);
    }

    /// Squared distance to the nearest stored point.
    fn nearest(&self, q: &[f64; 4]) -> f64 {
        let mut best = f64::INFINITY;
        Self::search(&self.pts, q, 0, &mut best);
        best
    }

    fn search(pts: &[[f64; 4]], q: &[f64; 4], depth: usize, best: &mut f64) {
        if pts.is_empty() {
            return;
        }
        let mid = pts.len() / 2;
        let p = &pts[mid];
        let d2: f64 = (0..4).map(|k| (p[k] - q[k]).powi(2)).sum();
        if d2 < *best {
            *best = d2;
        }
        let axis = depth % 4;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { (&pts[..mid], &pts[mid + 1..]) } else { (&pts[mid + 1..], &pts[..mid]) };
        Self::search(near, q, depth + 1, best);
        if diff * diff < *best {
            Self::search(far, q, depth + 1, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disk() -> FixedDomain {
        FixedDomain::unit_disk_half_robin()
    }

    fn disk_domain(cavity: Option<Cavity>) -> TimeVaryingDomain {
        TimeVaryingDomain::new(disk(), cavity, 1.0, 0.05).unwrap()
    }

    #[test]
    fn classify_examples() {
        let d = disk_domain(None);
        assert_eq!(d.classify_point(0.3, &[0.0, 1.0, 0.0]).unwrap(), BoundaryClass::Robin);
        assert_eq!(d.classify_point(0.0, &[1.0, 0.0, 0.0]).unwrap(), BoundaryClass::Pi);
        assert_eq!(d.classify_point(0.0, &[-1.0, 0.0, 0.0]).unwrap(), BoundaryClass::Pi);
        assert_eq!(d.classify_point(0.0, &[0.0, -1.0, 0.0]).unwrap(), BoundaryClass::DirichletFixed);
        assert_eq!(d.classify_point(0.0, &[0.2, 0.1, 0.0]).unwrap(), BoundaryClass::Interior);
        assert!(d.classify_point(0.0, &[1.5, 0.0, 0.0]).is_err());

        let line = TimeVaryingDomain::cylinder(
            FixedDomain::unit_interval(EndCondition::Robin, EndCondition::Dirichlet),
            1.0,
        );
        assert_eq!(line.classify_point(0.0, &[1.0, 0.0, 0.0]).unwrap(), BoundaryClass::DirichletFixed);
        assert_eq!(line.classify_point(0.0, &[0.0, 0.0, 0.0]).unwrap(), BoundaryClass::Robin);
        assert_eq!(line.classify_point(0.0, &[0.4, 0.0, 0.0]).unwrap(), BoundaryClass::Interior);
    }

    #[test]
    fn inside_examples() {
        let d = disk_domain(None);
        assert!(d.inside(0.0, &[0.3, 0.3, 0.0]));
        assert!(!d.inside(0.0, &[0.0, 1.0, 0.0]));
        let c = disk_domain(Some(Cavity::fixed([0.2, 0.0, 0.0], 0.3).unwrap()));
        assert!(!c.inside(0.5, &[0.2, 0.0, 0.0]));
        assert!(!c.inside(0.5, &[0.5, 0.0, 0.0]));
        assert!(c.inside(0.5, &[0.51, 0.0, 0.0]));
    }

    #[test]
    fn signed_distance_examples() {
        let (phi, n) = disk().signed_distance_and_normal(&[0.5, 0.0, 0.0]).unwrap();
        assert!((phi - 0.5).abs() < 1e-15);
        assert_eq!(n, [-1.0, 0.0, 0.0]);
        let (phi, n) = disk().signed_distance_and_normal(&[1.1, 0.0, 0.0]).unwrap();
        assert!((phi + 0.1).abs() < 1e-12);
        assert_eq!(n, [-1.0, 0.0, 0.0]);
        let line = FixedDomain::unit_interval(EndCondition::Robin, EndCondition::Dirichlet);
        let (phi, n) = line.signed_distance_and_normal(&[0.2, 0.0, 0.0]).unwrap();
        assert!((phi - 0.2).abs() < 1e-15);
        assert_eq!(n[0], 1.0);
        assert!(matches!(disk().signed_distance_and_normal(&[2.0, 0.0, 0.0]), Err(Error::Collar { .. })));
    }

    #[test]
    fn normal_is_unit_and_distance_gradient_is_unit_in_collar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dom = disk();
        let ball = FixedDomain::new(
            Shape::Ball { center: [0.1, 0.0, -0.2], radius: 0.8 },
            Dissection::Cap { axis: [0.0, 0.0, 1.0], half_angle: 1.0 },
            0.3,
        )
        .unwrap();
        for _ in 0..500 {
            let r = 1.0 + rng.random_range(-0.4..0.4);
            let a = rng.random_range(0.0..TAU);
            let x = [r * a.cos(), r * a.sin(), 0.0];
            let (phi, n) = dom.signed_distance_and_normal(&x).unwrap();
            assert!((norm(&n) - 1.0).abs() < 1e-12);
            let h = 1e-6;
            let gx = (dom.signed_distance(&[x[0] + h, x[1], 0.0]) - dom.signed_distance(&[x[0] - h, x[1], 0.0])) / (2.0 * h);
            let gy = (dom.signed_distance(&[x[0], x[1] + h, 0.0]) - dom.signed_distance(&[x[0], x[1] - h, 0.0])) / (2.0 * h);
            assert!(((gx * gx + gy * gy).sqrt() - 1.0).abs() < 1e-6);
            // moving along the normal changes φ by the step
            let step = 1e-4;
            let moved = dom.signed_distance(&axpy(step, &n, &x));
            assert!((moved - phi - step).abs() < 1e-8);

            let y = [0.1 + 0.5 * a.cos(), 0.3 * a.sin(), -0.2 + 0.6 * (2.0 * a).cos()];
            let (_, n3) = ball.signed_distance_and_normal(&y).unwrap();
            assert!((norm(&n3) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_partitions_boundary_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dom = disk_domain(None);
        for _ in 0..10_000 {
            let a = rng.random_range(0.0..TAU);
            let xb = [a.cos(), a.sin(), 0.0];
            let c = dom.classify_boundary(&xb);
            assert_ne!(c, BoundaryClass::Interior);
            let expected = if a.sin().abs() < 1e-9 {
                BoundaryClass::Pi
            } else if a < PI {
                BoundaryClass::Robin
            } else {
                BoundaryClass::DirichletFixed
            };
            assert_eq!(c, expected, "angle {a}");
            // openness: small perturbations keep the class away from Π
            let s = dom.base().robin_coordinate(&xb);
            if s.abs() > 1e-6 {
                let b = a + 1e-8;
                assert_eq!(dom.classify_boundary(&[b.cos(), b.sin(), 0.0]), c);
            }
        }
    }

    #[test]
    fn dirichlet_distance_examples() {
        let line = TimeVaryingDomain::cylinder(
            FixedDomain::unit_interval(EndCondition::Robin, EndCondition::Dirichlet),
            1.0,
        );
        assert!((line.dist_to_dirichlet(0.0, &[0.3, 0.0, 0.0]) - 0.7).abs() < 1e-15);

        let cav = disk_domain(Some(Cavity::fixed([0.0, 0.0, 0.0], 0.2).unwrap()));
        assert_eq!(cav.dist_to_dirichlet(0.0, &[0.2, 0.0, 0.0]), 0.0);
        // brute force over dense samples of the lower arc and the cavity circle
        let x = [0.5, 0.0, 0.0];
        let mut brute = f64::INFINITY;
        for k in 0..=200_000 {
            let a = PI + PI * k as f64 / 200_000.0;
            brute = brute.min(distance(&x, &[a.cos(), a.sin(), 0.0]));
            let b = TAU * k as f64 / 200_000.0;
            brute = brute.min(distance(&x, &[0.2 * b.cos(), 0.2 * b.sin(), 0.0]));
        }
        let d = cav.dist_to_dirichlet(0.0, &x);
        assert!((d - brute).abs() < 1e-9, "{d} vs {brute}");
        assert!((d - 0.3).abs() < 1e-12);

        let no_dirichlet = TimeVaryingDomain::cylinder(
            FixedDomain::new(
                Shape::Disk { center: [0.0, 0.0], radius: 1.0 },
                Dissection::Arc { start: 0.0, end: TAU },
                0.5,
            )
            .unwrap(),
            1.0,
        );
        assert_eq!(no_dirichlet.dist_to_dirichlet(0.0, &[0.1, 0.1, 0.0]), f64::INFINITY);
    }

    #[test]
    fn cavity_interpolates_and_freezes() {
        let cav = Cavity::new(vec![
            Keyframe { t: 0.0, center: [0.0, 0.0, 0.0], radius: 0.1 },
            Keyframe { t: 1.0, center: [0.4, 0.0, 0.0], radius: 0.3 },
        ])
        .unwrap();
        let (c, r) = cav.at(0.5);
        assert!((c[0] - 0.2).abs() < 1e-15 && (r - 0.2).abs() < 1e-15);
        assert_eq!(cav.at(7.0), ([0.4, 0.0, 0.0], 0.3));
        let (lc, lr) = cav.lipschitz();
        assert!((lc - 0.4).abs() < 1e-15 && (lr - 0.2).abs() < 1e-15);
        assert!(TimeVaryingDomain::new(disk(), Some(Cavity::fixed([0.8, 0.0, 0.0], 0.3).unwrap()), 1.0, 0.05).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let s = HausdorffSampling::default();
        let a = disk_domain(Some(Cavity::fixed([0.0, 0.2, 0.0], 0.2).unwrap()));
        assert_eq!(hausdorff_distance(&a, &a, &s).unwrap(), 0.0);
        let b = disk_domain(Some(Cavity::fixed([0.0, 0.2, 0.0], 0.25).unwrap()));
        assert!((hausdorff_distance(&a, &b, &s).unwrap() - 0.05).abs() < 1e-12);
        let c = disk_domain(Some(Cavity::fixed([0.07, 0.2, 0.0], 0.2).unwrap()));
        let h = hausdorff_distance(&a, &c, &s).unwrap();
        // brute force over the same samples
        let sa = a.sample_dirichlet(&s);
        let sc = c.sample_dirichlet(&s);
        let directed = |p: &[[f64; 4]], q: &[[f64; 4]]| {
            p.iter()
                .map(|x| q.iter().map(|y| (0..4).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>()).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max)
                .sqrt()
        };
        let small = HausdorffSampling { points_per_component: 64, time_steps: 4 };
        let (pa, pc) = (a.sample_dirichlet(&small), c.sample_dirichlet(&small));
        let brute = directed(&pa, &pc).max(directed(&pc, &pa));
        assert!((hausdorff_between(&pa, &pc).unwrap() - brute).abs() < 1e-14);
        assert!((h - 0.07).abs() <= 2.0 * TAU * 0.2 / 256.0, "{h}");
        assert!(sa.len() == sc.len());
        let empty = TimeVaryingDomain::cylinder(
            FixedDomain::new(
                Shape::Disk { center: [0.0, 0.0], radius: 1.0 },
                Dissection::Arc { start: 0.0, end: TAU },
                0.5,
            )
            .unwrap(),
            1.0,
        );
        assert!(hausdorff_distance(&empty, &a, &s).is_err());
    }

    #[test]
    fn hausdorff_symmetric_and_triangle() {
        let s = HausdorffSampling { points_per_component: 64, time_steps: 16 };
        let dom = |cx: f64, r: f64| disk_domain(Some(Cavity::fixed([cx, 0.1, 0.0], r).unwrap()));
        let (a, b, c) = (dom(0.0, 0.2), dom(0.1, 0.15), dom(-0.05, 0.3));
        let ab = hausdorff_distance(&a, &b, &s).unwrap();
        let ba = hausdorff_distance(&b, &a, &s).unwrap();
        let bc = hausdorff_distance(&b, &c, &s).unwrap();
        let ac = hausdorff_distance(&a, &c, &s).unwrap();
        assert_eq!(ab, ba);
        let res = TAU * 0.3 / 64.0;
        assert!(ac <= ab + bc + 2.0 * res);
    }
}
