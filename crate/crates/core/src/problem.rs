//! PDE coefficients and data, the non-divergence rewrite and assumption checks.
//!
//! The operator is `∇·(A∇u + a⃗u) − b⃗·∇u − a·u`, with flux condition
//! `−(A∇u + a⃗u)·n_in + σ·u = −ψ` on Γ′ and `u = 0` on the Dirichlet part.
//! The backward equation reads `u_t + 𝓛u = f` with `u(T) = h`.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{self, Expr, Field, Var};
use crate::geometry::{BoundaryClass, Point, Shape, TimeVaryingDomain};

/// Row-major 3×3 matrix; entries beyond the dimension are zero.
pub type Mat3 = [[f64; 3]; 3];

/// Divergence-form coefficients as expression trees.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    dim: usize,
    diffusion: Vec<Vec<Expr>>,
    a_vec: Vec<Expr>,
    b_vec: Vec<Expr>,
    a_scal: Expr,
    sigma_rob: Expr,
    nu: Option<f64>,
}

impl CoefficientSet {
    pub fn new(
        diffusion: Vec<Vec<Expr>>,
        a_vec: Vec<Expr>,
        b_vec: Vec<Expr>,
        a_scal: Expr,
        sigma_rob: Expr,
    ) -> Result<Self> {
        let dim = diffusion.len();
        if !(1..=3).contains(&dim) || diffusion.iter().any(|row| row.len() != dim) {
            return Err(Error::Validation("diffusion matrix must be square of size 1..3".into()));
        }
        if a_vec.len() != dim || b_vec.len() != dim {
            return Err(Error::Validation(format!("drift vectors must have {dim} components")));
        }
        let over = diffusion
            .iter()
            .flatten()
            .chain(&a_vec)
            .chain(&b_vec)
            .chain([&a_scal, &sigma_rob])
            .filter_map(Expr::max_coord)
            .find(|&i| i >= dim);
        if let Some(i) = over {
            return Err(Error::Expr(expr::ExprError::DimensionExceeded { index: i + 1, dim }));
        }
        Ok(Self { dim, diffusion, a_vec, b_vec, a_scal, sigma_rob, nu: None })
    }

    /// `A = αI` with every other coefficient zero.
    pub fn isotropic(dim: usize, alpha: f64) -> Self {
        let diffusion = (0..dim)
            .map(|i| (0..dim).map(|j| Expr::constant(if i == j { alpha } else { 0.0 })).collect())
            .collect();
        let zeros = vec![Expr::constant(0.0); dim];
        Self::new(diffusion, zeros.clone(), zeros, Expr::constant(0.0), Expr::constant(0.0))
            .expect("isotropic coefficients are well formed")
    }

    pub fn with_a_vec(mut self, a_vec: Vec<Expr>) -> Self {
        assert_eq!(a_vec.len(), self.dim);
        self.a_vec = a_vec;
        self
    }

    pub fn with_b_vec(mut self, b_vec: Vec<Expr>) -> Self {
        assert_eq!(b_vec.len(), self.dim);
        self.b_vec = b_vec;
        self
    }

    pub fn with_a_scal(mut self, a: Expr) -> Self {
        self.a_scal = a;
        self
    }

    pub fn with_sigma_rob(mut self, s: Expr) -> Self {
        self.sigma_rob = s;
        self
    }

    /// Declared ellipticity constant ν; validation fails below it.
    pub fn with_nu(mut self, nu: f64) -> Self {
        self.nu = Some(nu);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nu(&self) -> Option<f64> {
        self.nu
    }

    pub fn diffusion(&self) -> &[Vec<Expr>] {
        &self.diffusion
    }

    pub fn a_vec(&self) -> &[Expr] {
        &self.a_vec
    }

    pub fn b_vec(&self) -> &[Expr] {
        &self.b_vec
    }

    pub fn a_scal(&self) -> &Expr {
        &self.a_scal
    }

    pub fn sigma_rob(&self) -> &Expr {
        &self.sigma_rob
    }

    fn diffusion_at(&self, t: f64, x: &[f64]) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for i in 0..self.dim {
            for j in 0..self.dim {
                m[i][j] = self.diffusion[i][j].eval(t, x);
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegularityClass {
    Smooth,
    /// Data only in the mixed Lebesgue classes; the representation holds a.e.
    Lp { p1: f64, p2: f64, p3: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceData {
    pub f: Field,
    pub psi: Field,
    pub h: Field,
    pub regularity: RegularityClass,
}

impl SourceData {
    pub fn new(f: Expr, psi: Expr, h: Expr) -> Self {
        Self { f: Field::new(f), psi: Field::new(psi), h: Field::new(h), regularity: RegularityClass::Smooth }
    }

    pub fn zero() -> Self {
        Self::new(Expr::constant(0.0), Expr::constant(0.0), Expr::constant(0.0))
    }

    pub fn with_regularity(mut self, r: RegularityClass) -> Self {
        self.regularity = r;
        self
    }

    pub fn is_zero(&self) -> bool {
        self.f.is_zero() && self.psi.is_zero() && self.h.is_zero()
    }
}

/// Non-divergence form `Tr(A∇²u) + c⃗·∇u + c·u` with oblique boundary
/// operator `β·∇u + γ·u` on Γ′.
#[derive(Debug, Clone, PartialEq)]
pub struct NonDivForm {
    dim: usize,
    a: Vec<Field>,
    c_vec: Vec<Field>,
    c_scal: Field,
    a_vec: Vec<Field>,
    sigma_rob: Field,
    const_a: Option<Mat3>,
    const_factor: Option<Mat3>,
}

/// Rewrites the divergence-form operator: `c⃗_j = Σ_i ∂_i A_ij + a⃗_j − b⃗_j`,
/// `c = ∇·a⃗ − a`, `β = A n_in`, `γ = a⃗·n_in − σ`.
pub fn to_nondivergence(coeffs: &CoefficientSet) -> Result<NonDivForm> {
    let n = coeffs.dim;
    let mut c_vec = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = expr::sub(coeffs.a_vec[j].clone(), coeffs.b_vec[j].clone());
        for i in 0..n {
            e = expr::add(e, coeffs.diffusion[i][j].derivative(Var::Coord(i))?);
        }
        c_vec.push(Field::new(e));
    }
    let mut div_a = Expr::constant(0.0);
    for i in 0..n {
        div_a = expr::add(div_a, coeffs.a_vec[i].derivative(Var::Coord(i))?);
    }
    let c_scal = Field::new(expr::sub(div_a, coeffs.a_scal.clone()));
    let a: Vec<Field> = coeffs.diffusion.iter().flatten().cloned().map(Field::new).collect();

    let const_a = a.iter().map(Field::as_constant).collect::<Option<Vec<f64>>>().map(|vals| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..n {
            for j in 0..n {
                m[i][j] = vals[i * n + j];
            }
        }
        m
    });
    let const_factor = match &const_a {
        Some(m) => Some(diffusion_factor(m, n)?),
        None => None,
    };
    Ok(NonDivForm {
        dim: n,
        a,
        c_vec,
        c_scal,
        a_vec: coeffs.a_vec.iter().cloned().map(Field::new).collect(),
        sigma_rob: Field::new(coeffs.sigma_rob.clone()),
        const_a,
        const_factor,
    })
}

impl NonDivForm {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn diffusion(&self, t: f64, x: &Point) -> Mat3 {
        if let Some(m) = self.const_a {
            return m;
        }
        let n = self.dim;
        let mut m = [[0.0; 3]; 3];
        for i in 0..n {
            for j in 0..n {
                m[i][j] = self.a[i * n + j].eval(t, x);
            }
        }
        m
    }

    /// Lower-triangular `M` with `MMᵀ = 2A(t, x)`.
    #[inline]
    pub fn factor(&self, t: f64, x: &Point) -> Result<Mat3> {
        match self.const_factor {
            Some(m) => Ok(m),
            None => diffusion_factor(&self.diffusion(t, x), self.dim),
        }
    }

    #[inline]
    pub fn drift(&self, t: f64, x: &Point) -> Point {
        let mut c = [0.0; 3];
        for (ci, f) in c.iter_mut().zip(&self.c_vec) {
            *ci = f.eval(t, x);
        }
        c
    }

    #[inline]
    pub fn c_scal(&self, t: f64, x: &Point) -> f64 {
        self.c_scal.eval(t, x)
    }

    pub fn c_vec_field(&self) -> &[Field] {
        &self.c_vec
    }

    pub fn c_scal_field(&self) -> &Field {
        &self.c_scal
    }

    pub fn is_constant_diffusion(&self) -> bool {
        self.const_a.is_some()
    }

    /// Conormal `β = A n_in` at a boundary point.
    #[inline]
    pub fn beta(&self, t: f64, xb: &Point, n_in: &Point) -> Point {
        let a = self.diffusion(t, xb);
        [
            a[0][0] * n_in[0] + a[0][1] * n_in[1] + a[0][2] * n_in[2],
            a[1][0] * n_in[0] + a[1][1] * n_in[1] + a[1][2] * n_in[2],
            a[2][0] * n_in[0] + a[2][1] * n_in[1] + a[2][2] * n_in[2],
        ]
    }

    /// `γ = a⃗·n_in − σ` at a boundary point.
    #[inline]
    pub fn gamma(&self, t: f64, xb: &Point, n_in: &Point) -> f64 {
        let an: f64 = self.a_vec.iter().zip(n_in).map(|(f, n)| f.eval(t, xb) * n).sum();
        an - self.sigma_rob.eval(t, xb)
    }

    /// Whether γ vanishes identically.
    pub fn gamma_is_zero(&self) -> bool {
        self.sigma_rob.is_zero() && self.a_vec.iter().all(Field::is_zero)
    }
}

/// Lower-triangular Cholesky factor of `2A`.
pub fn diffusion_factor(a: &Mat3, dim: usize) -> Result<Mat3> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = 2.0 * a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 1e-14 * a[i][i].abs()) {
                    return Err(Error::NotPositiveDefinite);
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Smallest eigenvalue of the symmetric leading `dim × dim` block.
pub fn min_eigenvalue(m: &Mat3, dim: usize) -> f64 {
    match dim {
        1 => m[0][0],
        2 => {
            let (a, b, d) = (m[0][0], 0.5 * (m[0][1] + m[1][0]), m[1][1]);
            0.5 * (a + d) - (0.25 * (a - d).powi(2) + b * b).sqrt()
        }
        _ => {
            let s = |i: usize, j: usize| 0.5 * (m[i][j] + m[j][i]);
            let p1 = s(0, 1).powi(2) + s(0, 2).powi(2) + s(1, 2).powi(2);
            if p1 == 0.0 {
                return m[0][0].min(m[1][1]).min(m[2][2]);
            }
            let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
            let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
            let p = (p2 / 6.0).sqrt();
            let b = |i: usize, j: usize| (s(i, j) - if i == j { q } else { 0.0 }) / p;
            let det = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1))
                - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
                + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
            let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
            q + 2.0 * p * (phi + TAU / 3.0).cos()
        }
    }
}

/// Evaluates a field with coefficients frozen after the horizon.
#[inline]
pub fn time_extend(field: &Field, horizon: f64, t: f64, x: &Point) -> f64 {
    field.eval(t.min(horizon), x)
}

/// Coefficients, data and their rewrite for one terminal-boundary problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    coeffs: CoefficientSet,
    data: SourceData,
    nondiv: NonDivForm,
    horizon: f64,
}

impl Problem {
    pub fn new(coeffs: CoefficientSet, data: SourceData, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::Validation("horizon T must be positive".into()));
        }
        let nondiv = to_nondivergence(&coeffs)?;
        Ok(Self { coeffs, data, nondiv, horizon })
    }

    pub fn coeffs(&self) -> &CoefficientSet {
        &self.coeffs
    }

    pub fn data(&self) -> &SourceData {
        &self.data
    }

    pub fn nondiv(&self) -> &NonDivForm {
        &self.nondiv
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.coeffs.dim
    }

    /// Same coefficients with different data.
    pub fn with_data(&self, data: SourceData) -> Self {
        Self { data, ..self.clone() }
    }

    #[inline]
    pub fn f(&self, t: f64, x: &Point) -> f64 {
        time_extend(&self.data.f, self.horizon, t, x)
    }

    #[inline]
    pub fn psi(&self, t: f64, x: &Point) -> f64 {
        time_extend(&self.data.psi, self.horizon, t, x)
    }

    /// Terminal value, extended by zero outside D(T).
    #[inline]
    pub fn terminal(&self, x: &Point, domain: &TimeVaryingDomain) -> f64 {
        if domain.in_cavity(self.horizon, x) {
            0.0
        } else {
            self.data.h.eval(self.horizon, x)
        }
    }

    #[inline]
    pub fn sigma_rob(&self, t: f64, x: &Point) -> f64 {
        time_extend(&self.nondiv.sigma_rob, self.horizon, t, x)
    }

    #[inline]
    pub fn a_vec(&self, t: f64, x: &Point) -> Point {
        let mut out = [0.0; 3];
        for (o, f) in out.iter_mut().zip(&self.nondiv.a_vec) {
            *o = time_extend(f, self.horizon, t, x);
        }
        out
    }

    #[inline]
    pub fn b_vec_field(&self) -> Vec<Field> {
        self.coeffs.b_vec.iter().cloned().map(Field::new).collect()
    }

    #[inline]
    pub fn a_scal(&self, t: f64, x: &Point) -> f64 {
        self.coeffs.a_scal.eval(t.min(self.horizon), x)
    }

    #[inline]
    pub fn diffusion(&self, t: f64, x: &Point) -> Mat3 {
        self.nondiv.diffusion(t.min(self.horizon), x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryMargins {
    pub pi_empty: bool,
    pub cavity_to_gamma: Option<f64>,
    pub cavity_to_pi: Option<f64>,
    pub center_lipschitz: Option<f64>,
    pub radius_lipschitz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Minimum over samples of the smallest eigenvalue of A.
    pub ellipticity_margin: f64,
    /// Sampled Lipschitz moduli in (t, x).
    pub moduli: BTreeMap<String, f64>,
    pub sup_norms: BTreeMap<String, f64>,
    pub data_class: RegularityClass,
    pub geometry: GeometryMargins,
    pub warnings: Vec<String>,
    pub n_samples: usize,
}

/// Sampled moduli above this count as evidence of non-smooth data.
const ROUGH_MODULUS: f64 = 1e6;

/// Checks ellipticity (hard failure) and reports moduli, sup norms, the data
/// class and geometric margins (warnings only).
pub fn validate_assumptions(
    problem: &Problem,
    domain: &TimeVaryingDomain,
    n_samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    let coeffs = &problem.coeffs;
    let data = &problem.data;
    let dim = coeffs.dim;
    if dim != domain.dim() {
        return Err(Error::Validation(format!(
            "coefficients are {dim}-dimensional but the domain is {}-dimensional",
            domain.dim()
        )));
    }
    let horizon = problem.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interior: Vec<(f64, Point)> = (0..n_samples.max(1))
        .map(|_| (rng.random_range(0.0..=horizon), sample_closure(domain, &mut rng)))
        .collect();
    let on_gamma: Vec<(f64, Point)> = (0..n_samples.max(1))
        .map(|_| (rng.random_range(0.0..=horizon), sample_boundary(domain, &mut rng)))
        .collect();
    let boundary: Vec<(f64, Point)> =
        on_gamma.iter().copied().filter(|(_, xb)| domain.classify_boundary(xb) == BoundaryClass::Robin).collect();

    let mut margin = f64::INFINITY;
    for (t, x) in interior.iter().chain(&on_gamma) {
        let lam = min_eigenvalue(&coeffs.diffusion_at(*t, x), dim);
        margin = margin.min(if lam.is_nan() { f64::NEG_INFINITY } else { lam });
        if !(lam > 0.0) {
            return Err(Error::Validation(format!(
                "A is not uniformly elliptic: smallest eigenvalue {lam} at t={t}, x={:?}",
                &x[..dim]
            )));
        }
        if let Some(nu) = coeffs.nu {
            if lam < nu {
                return Err(Error::Validation(format!(
                    "smallest eigenvalue {lam} at t={t}, x={:?} is below the declared nu={nu}",
                    &x[..dim]
                )));
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            let asym = interior
                .iter()
                .map(|(t, x)| (coeffs.diffusion[i][j].eval(*t, x) - coeffs.diffusion[j][i].eval(*t, x)).abs())
                .fold(0.0, f64::max);
            if asym > 1e-12 {
                return Err(Error::Validation(format!("A is not symmetric (entry {i},{j} differs by {asym})")));
            }
        }
    }

    let mut named: Vec<(String, Expr, bool)> = Vec::new();
    for i in 0..dim {
        for j in i..dim {
            named.push((format!("A{}{}", i + 1, j + 1), coeffs.diffusion[i][j].clone(), false));
        }
        named.push((format!("a_vec{}", i + 1), coeffs.a_vec[i].clone(), false));
        named.push((format!("b_vec{}", i + 1), coeffs.b_vec[i].clone(), false));
    }
    named.push(("a_scal".into(), coeffs.a_scal.clone(), false));
    named.push(("sigma_rob".into(), coeffs.sigma_rob.clone(), true));

    let mut moduli = BTreeMap::new();
    let mut sup_norms = BTreeMap::new();
    let mut warnings = Vec::new();
    let scale = domain.base().radius();
    let mut record = |name: &str, f: &dyn Fn(f64, &Point) -> f64, pts: &[(f64, Point)], rng: &mut ChaCha8Rng| {
        let (sup, modulus) = sample_norms(f, pts, scale, horizon, dim, rng);
        if !sup.is_finite() {
            warnings.push(format!("{name} is not bounded on the samples"));
        }
        sup_norms.insert(name.to_string(), sup);
        moduli.insert(name.to_string(), modulus);
        modulus
    };
    for (name, e, on_boundary) in &named {
        let pts = if *on_boundary { &boundary } else { &interior };
        record(name, &|t, x| e.eval(t, x), pts, &mut rng);
    }
    record("f", &|t, x| data.f.eval(t, x), &interior, &mut rng);
    let m_psi = record("psi", &|t, x| data.psi.eval(t, x), &boundary, &mut rng);
    let m_h = record("h", &|_, x| data.h.eval(horizon, x), &interior, &mut rng);

    let jump = has_jump(&|_, x| data.h.eval(horizon, x), &interior, horizon)
        || has_jump(&|t, x| data.psi.eval(t, x), &boundary, horizon);
    let rough = jump || m_psi > ROUGH_MODULUS || m_h > ROUGH_MODULUS || !m_psi.is_finite() || !m_h.is_finite();
    let data_class = match (data.regularity, rough) {
        (RegularityClass::Smooth, false) => RegularityClass::Smooth,
        (RegularityClass::Smooth, true) => RegularityClass::Lp { p1: 2.0, p2: 2.0, p3: 2.0 },
        (lp, _) => lp,
    };
    if let RegularityClass::Lp { p1, p2, p3 } = data_class {
        warnings.push(format!(
            "data are only in the Lebesgue class (p1={p1}, p2={p2}, p3={p3}); \
             the representation is claimed almost everywhere and computation proceeds"
        ));
    }
    let lower_dirichlet: Vec<Point> = domain.base().sample_fixed_dirichlet(64);
    if lower_dirichlet.iter().any(|x| data.h.eval(horizon, x).abs() > 1e-12) {
        warnings.push("h does not vanish on the fixed Dirichlet part; the solution jumps at t = T there".into());
    }

    let base = domain.base();
    let pi_empty = !base.has_pi();
    if pi_empty {
        warnings.push("the border between Robin and Dirichlet parts is empty (typical of 1D setups)".into());
    }
    if domain.disconnects() {
        warnings.push("the cavity splits the 1D interval into two components".into());
    }
    let margins = domain.cavity_margins();
    let lip = domain.cavity().map(|c| c.lipschitz());
    if let Some((_, to_pi)) = margins {
        if to_pi <= 0.0 && !pi_empty {
            warnings.push(format!("cavity comes within {to_pi:.3e} of the Robin/Dirichlet border"));
        }
    }
    let geometry = GeometryMargins {
        pi_empty,
        cavity_to_gamma: margins.map(|m| m.0),
        cavity_to_pi: margins.map(|m| m.1).filter(|v| v.is_finite()),
        center_lipschitz: lip.map(|l| l.0),
        radius_lipschitz: lip.map(|l| l.1),
    };

    Ok(ValidationReport {
        ellipticity_margin: margin,
        moduli,
        sup_norms,
        data_class,
        geometry,
        warnings,
        n_samples: interior.len(),
    })
}

fn sample_norms(
    f: &dyn Fn(f64, &Point) -> f64,
    pts: &[(f64, Point)],
    scale: f64,
    horizon: f64,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let mut sup: f64 = 0.0;
    let mut modulus: f64 = 0.0;
    let step = 1e-4 * scale.max(horizon);
    for (t, x) in pts {
        let v = f(*t, x);
        sup = if v.is_finite() { sup.max(v.abs()) } else { f64::INFINITY };
        let mut y = *x;
        let mut len2 = 0.0;
        for yi in y.iter_mut().take(dim) {
            let d = step * rng.random_range(-1.0..1.0);
            *yi += d;
            len2 += d * d;
        }
        let dt = step * rng.random_range(-1.0..1.0);
        len2 += dt * dt;
        let w = f((*t + dt).clamp(0.0, horizon), &y);
        let q = (w - v).abs() / len2.sqrt();
        modulus = if q.is_finite() { modulus.max(q) } else { f64::INFINITY };
    }
    (sup, modulus)
}

/// Looks for a jump along chords between consecutive samples: the largest
/// increment on a fine subdivision is bisected down to a tiny interval and
/// must persist.
fn has_jump(f: &dyn Fn(f64, &Point) -> f64, pts: &[(f64, Point)], horizon: f64) -> bool {
    const SUBDIV: usize = 128;
    let lerp = |a: &(f64, Point), b: &(f64, Point), s: f64| -> (f64, Point) {
        let t = (a.0 + s * (b.0 - a.0)).clamp(0.0, horizon);
        (t, std::array::from_fn(|i| a.1[i] + s * (b.1[i] - a.1[i])))
    };
    let eval = |p: &(f64, Point)| f(p.0, &p.1);
    for pair in pts.windows(2).take(64) {
        let (a, b) = (&pair[0], &pair[1]);
        let vals: Vec<f64> = (0..=SUBDIV).map(|k| eval(&lerp(a, b, k as f64 / SUBDIV as f64))).collect();
        let scale = vals.iter().filter(|v| v.is_finite()).fold(1.0f64, |m, v| m.max(v.abs()));
        let Some(k) = (0..SUBDIV)
            .filter(|&k| (vals[k + 1] - vals[k]).is_finite())
            .max_by(|&i, &j| (vals[i + 1] - vals[i]).abs().total_cmp(&(vals[j + 1] - vals[j]).abs()))
        else {
            continue;
        };
        let (mut lo, mut hi) = (k as f64 / SUBDIV as f64, (k + 1) as f64 / SUBDIV as f64);
        let (mut flo, mut fhi) = (vals[k], vals[k + 1]);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let fm = eval(&lerp(a, b, mid));
            if !fm.is_finite() {
                break;
            }
            if (fm - flo).abs() >= (fhi - fm).abs() {
                hi = mid;
                fhi = fm;
            } else {
                lo = mid;
                flo = fm;
            }
        }
        if (fhi - flo).abs() > 1e-6 * scale {
            return true;
        }
    }
    false
}

fn sample_closure(domain: &TimeVaryingDomain, rng: &mut ChaCha8Rng) -> Point {
    let base = domain.base();
    match *base.shape() {
        Shape::Interval { a, b } => [rng.random_range(a..=b), 0.0, 0.0],
        Shape::Disk { center, radius } => loop {
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if p[0] * p[0] + p[1] * p[1] <= 1.0 {
                break [center[0] + radius * p[0], center[1] + radius * p[1], 0.0];
            }
        },
        Shape::Ball { center, radius } => loop {
            let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                break std::array::from_fn(|i| center[i] + radius * p[i]);
            }
        },
    }
}

fn sample_boundary(domain: &TimeVaryingDomain, rng: &mut ChaCha8Rng) -> Point {
    let base = domain.base();
    match *base.shape() {
        Shape::Interval { a, b } => [if rng.random_bool(0.5) { a } else { b }, 0.0, 0.0],
        Shape::Disk { center, radius } => {
            let th = rng.random_range(0.0..TAU);
            [center[0] + radius * th.cos(), center[1] + radius * th.sin(), 0.0]
        }
        Shape::Ball { center, radius } => {
            let z: f64 = rng.random_range(-1.0..1.0);
            let th = rng.random_range(0.0..TAU);
            let r = (1.0 - z * z).sqrt();
            [center[0] + radius * r * th.cos(), center[1] + radius * r * th.sin(), center[2] + radius * z]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Cavity, EndCondition, FixedDomain};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Strategy};

    fn parse(s: &str, dim: usize) -> Expr {
        Expr::parse(s, dim).unwrap()
    }

    #[test]
    fn trivial_rewrite() {
        let nd = to_nondivergence(&CoefficientSet::isotropic(2, 1.0)).unwrap();
        let x = [0.3, -0.2, 0.0];
        assert_eq!(nd.drift(0.1, &x), [0.0; 3]);
        assert_eq!(nd.c_scal(0.1, &x), 0.0);
        let n = [0.0, -1.0, 0.0];
        assert_eq!(nd.beta(0.0, &[0.0, 1.0, 0.0], &n), n);
        assert_eq!(nd.gamma(0.0, &[0.0, 1.0, 0.0], &n), 0.0);
    }

    #[test]
    fn linear_a_vec_rewrite() {
        let c = CoefficientSet::isotropic(2, 1.0).with_a_vec(vec![parse("x1", 2), parse("x2", 2)]);
        let nd = to_nondivergence(&c).unwrap();
        let x = [0.4, -0.7, 0.0];
        let d = nd.drift(0.0, &x);
        assert!((d[0] - 0.4).abs() < 1e-15 && (d[1] + 0.7).abs() < 1e-15);
        assert_eq!(nd.c_scal_field().as_constant(), Some(2.0));
    }

    #[test]
    fn robin_gamma_sign() {
        // a⃗ = 0: γ = −σ, so a positive Robin coefficient discounts the weight
        let c = CoefficientSet::isotropic(1, 0.5).with_sigma_rob(Expr::constant(1.0));
        let nd = to_nondivergence(&c).unwrap();
        assert_eq!(nd.gamma(0.0, &[0.0; 3], &[1.0, 0.0, 0.0]), -1.0);
        let c = c.with_a_vec(vec![Expr::constant(0.25)]);
        let nd = to_nondivergence(&c).unwrap();
        assert_eq!(nd.gamma(0.0, &[0.0; 3], &[1.0, 0.0, 0.0]), -0.75);
    }

    #[test]
    fn non_differentiable_rejected() {
        let c = CoefficientSet::isotropic(1, 1.0).with_a_vec(vec![parse("x1^x1", 1)]);
        assert!(matches!(to_nondivergence(&c), Err(Error::Expr(_))));
    }

    /// Applies both operator forms to quadratic monomials symbolically and
    /// compares them at random points.
    #[test]
    fn rewrite_identity_on_quadratics() {
        let dim = 2;
        let c = CoefficientSet::new(
            vec![
                vec![parse("1 + 0.3*sin(x1*x2) + t", 2), parse("0.2*x1", 2)],
                vec![parse("0.2*x1", 2), parse("exp(0.1*x2) + x1^2", 2)],
            ],
            vec![parse("x1*t", 2), parse("cos(x2)", 2)],
            vec![parse("x2", 2), parse("-0.5", 2)],
            parse("sin(t + x1)", 2),
            Expr::constant(0.0),
        )
        .unwrap();
        let nd = to_nondivergence(&c).unwrap();
        let mut monomials = vec![Expr::constant(1.0)];
        for i in 0..dim {
            monomials.push(Expr::coord(i));
            for j in i..dim {
                monomials.push(expr::mul(Expr::coord(i), Expr::coord(j)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for q in &monomials {
            let grad: Vec<Expr> = (0..dim).map(|i| q.derivative(Var::Coord(i)).unwrap()).collect();
            // ∇·(A∇q + a⃗q) − b⃗·∇q − a q, assembled symbolically
            let mut lhs = Expr::constant(0.0);
            for i in 0..dim {
                let mut flux = expr::mul(c.a_vec[i].clone(), q.clone());
                for j in 0..dim {
                    flux = expr::add(flux, expr::mul(c.diffusion[i][j].clone(), grad[j].clone()));
                }
                lhs = expr::add(lhs, flux.derivative(Var::Coord(i)).unwrap());
                lhs = expr::sub(lhs, expr::mul(c.b_vec[i].clone(), grad[i].clone()));
            }
            lhs = expr::sub(lhs, expr::mul(c.a_scal.clone(), q.clone()));
            for _ in 0..1000 {
                let t = rng.random_range(0.0..1.0);
                let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0];
                let a = nd.diffusion(t, &x);
                let c_vec = nd.drift(t, &x);
                let mut rhs = nd.c_scal(t, &x) * q.eval(t, &x);
                for i in 0..dim {
                    rhs += c_vec[i] * grad[i].eval(t, &x);
                    for j in 0..dim {
                        let hij = grad[j].derivative(Var::Coord(i)).unwrap().eval(t, &x);
                        rhs += a[i][j] * hij;
                    }
                }
                let l = lhs.eval(t, &x);
                assert!((l - rhs).abs() <= 1e-8 * (1.0 + l.abs()), "{q}: {l} vs {rhs}");
            }
        }
    }

    #[test]
    fn neumann_beta_gamma() {
        let c = CoefficientSet::new(
            vec![vec![parse("2", 2), parse("0.5", 2)], vec![parse("0.5", 2), parse("1 + x1^2", 2)]],
            vec![Expr::constant(0.0); 2],
            vec![Expr::constant(0.0); 2],
            Expr::constant(0.0),
            Expr::constant(0.0),
        )
        .unwrap();
        let nd = to_nondivergence(&c).unwrap();
        let nu = 0.5;
        for k in 0..64 {
            let th = TAU * k as f64 / 64.0;
            let xb = [th.cos(), th.sin(), 0.0];
            let n = [-xb[0], -xb[1], 0.0];
            let b = nd.beta(0.0, &xb, &n);
            assert!(b[0] * n[0] + b[1] * n[1] >= nu);
            assert_eq!(nd.gamma(0.0, &xb, &n), 0.0);
        }
    }

    #[test]
    fn diffusion_factor_examples() {
        let half = [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(diffusion_factor(&half, 2).unwrap(), [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0; 3]]);
        let d = [[2.0, 0.0, 0.0], [0.0, 8.0, 0.0], [0.0; 3]];
        assert_eq!(diffusion_factor(&d, 2).unwrap(), [[2.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0; 3]]);
        let sing = [[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0; 3]];
        assert!(matches!(diffusion_factor(&sing, 2), Err(Error::NotPositiveDefinite)));
    }

    fn spd3() -> impl Strategy<Value = Mat3> {
        (proptest::array::uniform9(-1.0f64..1.0), 0.05f64..2.0).prop_map(|(g, shift)| {
            let mut a = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    a[i][j] = (0..3).map(|k| g[3 * i + k] * g[3 * j + k]).sum::<f64>();
                }
                a[i][i] += shift;
            }
            a
        })
    }

    proptest! {
        #[test]
        fn factor_reconstructs(a in spd3()) {
            let m = diffusion_factor(&a, 3).unwrap();
            let mut err: f64 = 0.0;
            let mut nrm: f64 = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let r: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                    err += (r - 2.0 * a[i][j]).powi(2);
                    nrm += (2.0 * a[i][j]).powi(2);
                }
                for j in i + 1..3 {
                    prop_assert_eq!(m[i][j], 0.0);
                }
            }
            prop_assert!(err.sqrt() <= 1e-12 * nrm.sqrt());
        }

        #[test]
        fn min_eigenvalue_is_rayleigh_minimum(a in spd3()) {
            let lam = min_eigenvalue(&a, 3);
            // λ_min ≤ every Rayleigh quotient, and A − λI is singular
            for v in [[1.0, 0.0, 0.0], [0.3, -0.4, 0.8], [0.0, 1.0, 1.0]] {
                let av: f64 = (0..3).map(|i| v[i] * (0..3).map(|j| a[i][j] * v[j]).sum::<f64>()).sum();
                let vv: f64 = v.iter().map(|x| x * x).sum();
                prop_assert!(lam <= av / vv + 1e-10);
            }
            let s = |i: usize, j: usize| a[i][j] - if i == j { lam } else { 0.0 };
            let det = s(0, 0) * (s(1, 1) * s(2, 2) - s(1, 2) * s(2, 1))
                - s(0, 1) * (s(1, 0) * s(2, 2) - s(1, 2) * s(2, 0))
                + s(0, 2) * (s(1, 0) * s(2, 1) - s(1, 1) * s(2, 0));
            prop_assert!(det.abs() <= 1e-9 * (1.0 + a[0][0] + a[1][1] + a[2][2]).powi(3));
        }
    }

    #[test]
    fn time_extend_freezes() {
        let f = Field::new(parse("t*x1", 1));
        let x = [2.0, 0.0, 0.0];
        assert_eq!(time_extend(&f, 1.0, 0.5, &x), 1.0);
        assert_eq!(time_extend(&f, 1.0, 2.0, &x), 2.0);
        assert_eq!(time_extend(&Field::Const(3.0), 1.0, 7.0, &x), 3.0);
    }

    fn line() -> TimeVaryingDomain {
        TimeVaryingDomain::cylinder(FixedDomain::unit_interval(EndCondition::Robin, EndCondition::Dirichlet), 1.0)
    }

    #[test]
    fn validation_examples() {
        let p = Problem::new(CoefficientSet::isotropic(1, 0.7).with_nu(0.7), SourceData::zero(), 1.0).unwrap();
        let rep = validate_assumptions(&p, &line(), 200, 1).unwrap();
        assert_eq!(rep.ellipticity_margin, 0.7);
        assert_eq!(rep.data_class, RegularityClass::Smooth);
        assert!(rep.geometry.pi_empty);

        let degenerate = CoefficientSet::new(
            vec![vec![parse("x1", 1)]],
            vec![Expr::constant(0.0)],
            vec![Expr::constant(0.0)],
            Expr::constant(0.0),
            Expr::constant(0.0),
        )
        .unwrap();
        let p = Problem::new(degenerate, SourceData::zero(), 1.0).unwrap();
        assert!(matches!(validate_assumptions(&p, &line(), 200, 1), Err(Error::Validation(_))));

        // h = 1 + sign(x1 - 0.5)
        let rough = SourceData::new(Expr::constant(0.0), Expr::constant(0.0), parse("1 + (x1 - 0.5)/((x1 - 0.5)^2)^0.5", 1));
        let p = Problem::new(CoefficientSet::isotropic(1, 1.0), rough, 1.0).unwrap();
        let rep = validate_assumptions(&p, &line(), 2000, 2).unwrap();
        assert!(matches!(rep.data_class, RegularityClass::Lp { .. }));
        assert!(rep.warnings.iter().any(|w| w.contains("Lebesgue")));

        let declared = SourceData::zero().with_regularity(RegularityClass::Lp { p1: 2.0, p2: 4.0, p3: 2.0 });
        let p = Problem::new(CoefficientSet::isotropic(1, 1.0), declared, 1.0).unwrap();
        let rep = validate_assumptions(&p, &line(), 50, 2).unwrap();
        assert!(rep.warnings.iter().any(|w| w.contains("Lebesgue")));
    }

    #[test]
    fn validation_reports_cavity_margins() {
        let dom = TimeVaryingDomain::new(
            FixedDomain::unit_disk_half_robin(),
            Some(Cavity::fixed([0.0, 0.3, 0.0], 0.2).unwrap()),
            1.0,
            0.05,
        )
        .unwrap();
        let p = Problem::new(CoefficientSet::isotropic(2, 0.5), SourceData::zero(), 1.0).unwrap();
        let rep = validate_assumptions(&p, &dom, 100, 3).unwrap();
        assert!((rep.geometry.cavity_to_gamma.unwrap() - 0.5).abs() < 1e-12);
        assert!((rep.geometry.cavity_to_pi.unwrap() - ((1.0f64 + 0.09).sqrt() - 0.2)).abs() < 1e-12);
        assert!(!rep.geometry.pi_empty);
    }
}
