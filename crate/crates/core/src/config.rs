//! Run configuration: a TOML (or JSON) document naming the problem, the
//! domain, solver settings, one task and the output directory.
//!
//! Expressions are kept as source strings so that a parsed config
//! serializes back to an equivalent document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::fd::FdGrid;
use crate::geometry::{point, Cavity, Dissection, EndCondition, FixedDomain, Keyframe, Shape, TimeVaryingDomain};
use crate::inverse::ShapeFamily;
use crate::observation::ObservationSpec;
use crate::problem::{CoefficientSet, Problem, SourceData};
use crate::sde::{Scheme, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub domain: DomainSection,
    pub solver: SolverSection,
    pub task: TaskSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Divergence-form coefficients and data in the variables `t, x1, x2, x3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub horizon: f64,
    /// Rows of A; its size fixes the dimension.
    pub diffusion: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_vec: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_vec: Option<Vec<String>>,
    #[serde(default = "zero_expr")]
    pub a_scal: String,
    #[serde(default = "zero_expr")]
    pub sigma_rob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(default = "zero_expr")]
    pub f: String,
    #[serde(default = "zero_expr")]
    pub psi: String,
    #[serde(default = "zero_expr")]
    pub h: String,
}

fn zero_expr() -> String {
    "0".into()
}

impl ProblemSection {
    pub fn dim(&self) -> usize {
        self.diffusion.len()
    }

    pub fn build(&self) -> Result<Problem> {
        let dim = self.dim();
        let parse = |s: &String| Expr::parse(s, dim).map_err(Error::from);
        let vector = |v: &Option<Vec<String>>| -> Result<Vec<Expr>> {
            match v {
                Some(v) => v.iter().map(parse).collect(),
                None => Ok(vec![Expr::constant(0.0); dim]),
            }
        };
        let diffusion = self.diffusion.iter().map(|row| row.iter().map(parse).collect()).collect::<Result<Vec<Vec<Expr>>>>()?;
        let mut coeffs =
            CoefficientSet::new(diffusion, vector(&self.a_vec)?, vector(&self.b_vec)?, parse(&self.a_scal)?, parse(&self.sigma_rob)?)?;
        if let Some(nu) = self.nu {
            coeffs = coeffs.with_nu(nu);
        }
        let data = SourceData::new(parse(&self.f)?, parse(&self.psi)?, parse(&self.h)?);
        Problem::new(coeffs, data, self.horizon)
    }
}

/// Ω with its dissection, in one tagged table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSection {
    Interval { a: f64, b: f64, left: EndCondition, right: EndCondition },
    /// Robin on the counterclockwise arc `robin_arc[0] → robin_arc[1]`.
    Disk { center: [f64; 2], radius: f64, robin_arc: [f64; 2] },
    /// Robin on the cap within `half_angle` of `axis`.
    Ball { center: [f64; 3], radius: f64, axis: [f64; 3], half_angle: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavityKeyframe {
    pub t: f64,
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub shape: ShapeSection,
    pub tubular_width: f64,
    /// Minimal distance from the cavity to Γ.
    #[serde(default)]
    pub margin: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cavity: Vec<CavityKeyframe>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_pi: Option<f64>,
}

impl DomainSection {
    pub fn base(&self) -> Result<FixedDomain> {
        let (shape, dissection) = match &self.shape {
            ShapeSection::Interval { a, b, left, right } => {
                (Shape::Interval { a: *a, b: *b }, Dissection::Ends { left: *left, right: *right })
            }
            ShapeSection::Disk { center, radius, robin_arc } => (
                Shape::Disk { center: *center, radius: *radius },
                Dissection::Arc { start: robin_arc[0], end: robin_arc[1] },
            ),
            ShapeSection::Ball { center, radius, axis, half_angle } => {
                (Shape::Ball { center: *center, radius: *radius }, Dissection::Cap { axis: *axis, half_angle: *half_angle })
            }
        };
        FixedDomain::new(shape, dissection, self.tubular_width)
    }

    pub fn build(&self, horizon: f64) -> Result<TimeVaryingDomain> {
        let base = self.base()?;
        let cavity = if self.cavity.is_empty() {
            None
        } else {
            let dim = base.dim();
            let frames = self
                .cavity
                .iter()
                .map(|k| {
                    if k.center.len() != dim {
                        return Err(Error::Config(format!("cavity center needs {dim} coordinates")));
                    }
                    Ok(Keyframe { t: k.t, center: point(&k.center), radius: k.radius })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(Cavity::new(frames)?)
        };
        let mut dom = TimeVaryingDomain::new(base, cavity, horizon, self.margin)?;
        if let Some(tol) = self.tol_pi {
            dom = dom.with_tol_pi(tol);
        }
        Ok(dom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collar_guard: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_grid: Option<FdGrid>,
}

impl SolverSection {
    pub fn sim(&self) -> SimConfig {
        let mut sim = SimConfig::new(self.dt, self.seed).with_scheme(self.scheme);
        if let Some(g) = self.collar_guard {
            sim = sim.with_collar_guard(g);
        }
        sim
    }

    pub fn fd_grid(&self) -> Result<FdGrid> {
        self.fd_grid.ok_or_else(|| Error::Config("this task needs solver.fd_grid".into()))
    }
}

/// Forward solver used by the inverse tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceBackend {
    #[default]
    Fd,
    Mc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSection {
    /// Monte Carlo estimates at `points`, each `[s, x1, ...]`.
    SolveMc { points: Vec<Vec<f64>> },
    /// Oracle values at `points`.
    SolveFd { points: Vec<Vec<f64>> },
    /// Both solvers at `points` and their gap report.
    Compare {
        points: Vec<Vec<f64>>,
        #[serde(default = "default_fd_tolerance")]
        fd_tolerance: f64,
    },
    /// Estimates approaching a boundary target along the inward normal.
    Probe {
        s: f64,
        target: Vec<f64>,
        distances: Vec<f64>,
        #[serde(default)]
        pi_collar: f64,
    },
    /// Least-squares shape fit to synthetic or external boundary data.
    Invert {
        family: ShapeFamily,
        lower: Vec<f64>,
        upper: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        theta_true: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data_path: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data_grid: Option<FdGrid>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        observation: Option<ObservationSpec>,
        #[serde(default)]
        backend: TraceBackend,
        #[serde(default = "default_grid_points")]
        grid_points: usize,
        #[serde(default = "default_budget")]
        budget: usize,
    },
    /// Posterior ensemble and Hellinger stability checks on perturbed data.
    Bayes {
        family: ShapeFamily,
        lower: Vec<f64>,
        upper: Vec<f64>,
        theta_true: Vec<f64>,
        noise_variance: f64,
        n_samples: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        design: Option<ObservationSpec>,
        #[serde(default)]
        backend: TraceBackend,
        #[serde(default = "default_pairs")]
        n_pairs: usize,
        /// Relative size of the perturbation between paired data vectors.
        #[serde(default = "default_perturbation")]
        perturbation: f64,
    },
}

fn default_fd_tolerance() -> f64 {
    0.01
}
fn default_grid_points() -> usize {
    5
}
fn default_budget() -> usize {
    300
}
fn default_pairs() -> usize {
    50
}
fn default_perturbation() -> f64 {
    0.5
}

impl TaskSection {
    pub fn name(&self) -> &'static str {
        match self {
            Self::SolveMc { .. } => "solve-mc",
            Self::SolveFd { .. } => "solve-fd",
            Self::Compare { .. } => "compare",
            Self::Probe { .. } => "probe",
            Self::Invert { .. } => "invert",
            Self::Bayes { .. } => "bayes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl RunConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Canonical JSON used for the config hash.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn build_problem(&self) -> Result<Problem> {
        self.problem.build()
    }

    pub fn build_domain(&self) -> Result<TimeVaryingDomain> {
        self.domain.build(self.problem.horizon)
    }

    /// Task names accepted on the command line.
    pub const TASKS: [&'static str; 6] = ["solve-mc", "solve-fd", "compare", "probe", "invert", "bayes"];
}
