//! Bayesian shape identification: forward map `F = G₂ ∘ G₁`, Gaussian
//! likelihood, self-normalized importance sampling from the prior, the
//! Hellinger distance between posteriors and the Lipschitz stability bound.
//!
//! All weight arithmetic is done on logarithms.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{mean_and_se, par_map};
use crate::inverse::{model_trace, ShapeModel, TraceSolver};
use crate::observation::ObservationSpec;
use crate::problem::Problem;
use crate::rng::derive_seed;

/// Effective sample sizes below this raise a warning.
pub const MIN_ESS: f64 = 10.0;

/// Forward map from shape parameters to `ℝ^m`.
pub trait ForwardModel: Sync {
    fn output_dim(&self) -> usize;
    fn forward(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// Boundary trace sampled on a design grid of times × window points. A
/// Monte Carlo solver uses its configured seed for every θ, so F stays a
/// fixed function.
#[derive(Debug, Clone)]
pub struct TraceForward {
    pub problem: Problem,
    pub model: ShapeModel,
    pub design: ObservationSpec,
    pub solver: TraceSolver,
}

impl TraceForward {
    /// Uniform 8 × 8 design on `[0, T] × Γ^ω`.
    pub fn default_design(window: &ObservationSpec) -> ObservationSpec {
        ObservationSpec { arc: window.arc, n_points: 8, n_times: 8 }
    }
}

impl ForwardModel for TraceForward {
    fn output_dim(&self) -> usize {
        self.design.n_points * self.design.n_times
    }

    fn forward(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = self.model.param(theta)?;
        Ok(model_trace(&self.problem, &p.domain, &self.design, &self.solver, false)?.values.values)
    }
}

/// i.i.d. Gaussian observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    variance: f64,
}

impl NoiseModel {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Config(format!("noise variance must be positive, got {variance}")));
        }
        Ok(Self { variance })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `log Ψ = −(m/2) log(2πσ²) − ‖y − F‖²/(2σ²)`.
pub fn log_likelihood_of(fy: &[f64], y: &[f64], noise: &NoiseModel) -> Result<f64> {
    if fy.len() != y.len() {
        return Err(Error::Shape(format!("data has {} entries, forward map {}", y.len(), fy.len())));
    }
    let m = y.len() as f64;
    Ok(-0.5 * m * (2.0 * PI * noise.variance).ln() - sq_dist(y, fy) / (2.0 * noise.variance))
}

pub fn log_likelihood(forward: &dyn ForwardModel, theta: &[f64], y: &[f64], noise: &NoiseModel) -> Result<f64> {
    log_likelihood_of(&forward.forward(theta)?, y, noise)
}

/// `Ψ(θ; y) = (2πσ²)^{−m/2} exp(−‖y − F(θ)‖²/(2σ²))`.
pub fn likelihood(forward: &dyn ForwardModel, theta: &[f64], y: &[f64], noise: &NoiseModel) -> Result<f64> {
    Ok(log_likelihood(forward, theta, y, noise)?.exp())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Uniform prior on a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformPrior {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl UniformPrior {
    pub fn from_model(model: &ShapeModel) -> Self {
        Self { lower: model.lower.clone(), upper: model.upper.clone() }
    }

    /// Sample `k` of a seeded sequence, independent of evaluation order.
    pub fn sample(&self, seed: u64, k: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
        self.lower.iter().zip(&self.upper).map(|(l, u)| l + (u - l) * rng.random::<f64>()).collect()
    }
}

/// Prior samples with their forward values, shared by every posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEnsemble {
    pub seed: u64,
    pub thetas: Vec<Vec<f64>>,
    pub forwards: Vec<Vec<f64>>,
}

impl PriorEnsemble {
    pub fn draw(forward: &dyn ForwardModel, prior: &UniformPrior, n_samples: usize, seed: u64, workers: usize) -> Result<Self> {
        if n_samples < 100 {
            return Err(Error::Config(format!("posterior needs at least 100 prior samples, got {n_samples}")));
        }
        let thetas: Vec<Vec<f64>> = (0..n_samples).map(|k| prior.sample(seed, k)).collect();
        let forwards = par_map(n_samples, workers, |k| forward.forward(&thetas[k]))?;
        Ok(Self { seed, thetas, forwards })
    }

    /// `1.1 · max_k ‖F(θ_k)‖`.
    pub fn c_f(&self) -> f64 {
        1.1 * self.forwards.iter().map(|f| norm(f)).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEnsemble {
    pub seed: u64,
    pub thetas: Vec<Vec<f64>>,
    pub log_psi: Vec<f64>,
    /// Normalized log-weights.
    pub log_weights: Vec<f64>,
    pub weights: Vec<f64>,
    /// `log Ẑ_Ψ` with `Ẑ_Ψ = mean_k Ψ(θ_k; y)`.
    pub log_z: f64,
    pub ess: f64,
    pub warnings: Vec<String>,
}

impl PosteriorEnsemble {
    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }

    pub fn mean(&self) -> Vec<f64> {
        let dim = self.thetas.first().map_or(0, Vec::len);
        (0..dim).map(|j| self.thetas.iter().zip(&self.weights).map(|(t, w)| w * t[j]).sum()).collect()
    }

    /// CSV with θ components, log-weight and weight.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.thetas.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (1..=dim).map(|j| format!("theta{j}")).collect();
        header.extend(["log_weight".to_string(), "weight".to_string()]);
        w.write_record(&header)?;
        for ((t, lw), wt) in self.thetas.iter().zip(&self.log_weights).zip(&self.weights) {
            let mut rec: Vec<String> = t.iter().map(f64::to_string).collect();
            rec.push(lw.to_string());
            rec.push(wt.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Self-normalized importance weights for data `y`.
pub fn posterior_from(prior: &PriorEnsemble, y: &[f64], noise: &NoiseModel) -> Result<PosteriorEnsemble> {
    let log_psi = prior.forwards.iter().map(|f| log_likelihood_of(f, y, noise)).collect::<Result<Vec<f64>>>()?;
    let n = log_psi.len() as f64;
    let lse = log_sum_exp(&log_psi);
    let log_weights: Vec<f64> = log_psi.iter().map(|l| l - lse).collect();
    // Normalize relative to the largest term so the sum is 1 to rounding
    // even when |log Ψ| is large.
    let mx = log_psi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rel: Vec<f64> = log_psi.iter().map(|l| (l - mx).exp()).collect();
    let total: f64 = rel.iter().sum();
    let weights: Vec<f64> = rel.iter().map(|r| r / total).collect();
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let mut warnings = Vec::new();
    if ess < MIN_ESS {
        warnings.push(format!("effective sample size {ess:.2} is below {MIN_ESS}"));
    }
    Ok(PosteriorEnsemble {
        seed: prior.seed,
        thetas: prior.thetas.clone(),
        log_psi,
        log_weights,
        weights,
        log_z: lse - n.ln(),
        ess,
        warnings,
    })
}

/// Draws the prior ensemble and weights it for `y`.
pub fn posterior(
    forward: &dyn ForwardModel,
    y: &[f64],
    noise: &NoiseModel,
    prior: &UniformPrior,
    n_samples: usize,
    seed: u64,
    workers: usize,
) -> Result<PosteriorEnsemble> {
    let ens = PriorEnsemble::draw(forward, prior, n_samples, seed, workers)?;
    posterior_from(&ens, y, noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HellingerEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// `√(½ · mean_k (√(Ψ_k/Ẑ) − √(Ψ′_k/Ẑ′))²)` over common prior samples.
pub fn hellinger(a: &PosteriorEnsemble, b: &PosteriorEnsemble) -> Result<HellingerEstimate> {
    if a.thetas != b.thetas {
        return Err(Error::Shape("posteriors are built on different prior samples".into()));
    }
    let terms: Vec<f64> = a
        .log_psi
        .iter()
        .zip(&b.log_psi)
        .map(|(la, lb)| {
            let d = (0.5 * (la - a.log_z)).exp() - (0.5 * (lb - b.log_z)).exp();
            d * d
        })
        .collect();
    let (mean, se) = mean_and_se(&terms);
    let value = (0.5 * mean).sqrt();
    let std_error = if value > 0.0 { 0.25 * se / value } else { 0.0 };
    Ok(HellingerEstimate { value, std_error })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub d_hell: f64,
    pub std_error: f64,
    /// Upper bound `max(‖y‖, ‖y′‖) + C_F` for `σ(y, y′)`.
    pub sigma_yy: f64,
    pub data_distance: f64,
    /// Natural log of the bound, finite even when the bound overflows.
    pub log_bound: f64,
    pub bound: f64,
    pub pass: bool,
}

/// `exp(3σ(y,y′)²/(4σ²)) · (σ(y,y′)/σ) · (‖y − y′‖/σ)`, in logs.
pub fn stability_log_bound(sigma_yy: f64, data_distance: f64, noise: &NoiseModel) -> f64 {
    let s = noise.std_dev();
    if data_distance == 0.0 {
        return f64::NEG_INFINITY;
    }
    0.75 * sigma_yy * sigma_yy / noise.variance + (sigma_yy / s).ln() + (data_distance / s).ln()
}

/// Compares the estimated Hellinger distance with the stability bound.
pub fn stability_bound_check(
    y: &[f64],
    y2: &[f64],
    noise: &NoiseModel,
    prior: &PriorEnsemble,
    c_f: f64,
) -> Result<StabilityReport> {
    if y.len() != y2.len() {
        return Err(Error::Shape("data vectors differ in length".into()));
    }
    let a = posterior_from(prior, y, noise)?;
    let b = posterior_from(prior, y2, noise)?;
    let h = hellinger(&a, &b)?;
    let sigma_yy = norm(y).max(norm(y2)) + c_f;
    let data_distance = sq_dist(y, y2).sqrt();
    let log_bound = stability_log_bound(sigma_yy, data_distance, noise);
    let bound = log_bound.exp();
    let pass = h.value <= bound + 3.0 * h.std_error;
    Ok(StabilityReport { d_hell: h.value, std_error: h.std_error, sigma_yy, data_distance, log_bound, bound, pass })
}

/// Hellinger distance for a scalar parameter by the midpoint rule on `n`
/// cells of the prior interval, with `log Ψ` supplied pointwise.
pub fn hellinger_quadrature(log_psi_a: &dyn Fn(f64) -> f64, log_psi_b: &dyn Fn(f64) -> f64, lower: f64, upper: f64, n: usize) -> f64 {
    let nodes: Vec<f64> = (0..n).map(|k| lower + (upper - lower) * (k as f64 + 0.5) / n as f64).collect();
    let la: Vec<f64> = nodes.iter().map(|&x| log_psi_a(x)).collect();
    let lb: Vec<f64> = nodes.iter().map(|&x| log_psi_b(x)).collect();
    // Prior density 1/(upper − lower) makes each cell carry weight 1/n.
    let za = log_sum_exp(&la) - (n as f64).ln();
    let zb = log_sum_exp(&lb) - (n as f64).ln();
    let s: f64 = la
        .iter()
        .zip(&lb)
        .map(|(a, b)| {
            let d = (0.5 * (a - za)).exp() - (0.5 * (b - zb)).exp();
            d * d
        })
        .sum::<f64>()
        / n as f64;
    (0.5 * s).sqrt()
}
