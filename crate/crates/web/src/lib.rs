//! Browser bindings: the survival field of a disk with a circular cavity,
//! sample paths of the reflected diffusion, and the boundary misfit as a
//! function of the cavity radius.
//!
//! The scene is the unit disk with Robin upper half, Dirichlet lower half,
//! `A = I/2`, `f = ψ = 0`, `h = 1` and `T = 1`, so `u(s, x) = P(σ > T)`.

use stochrep::estimator::McConfig;
use stochrep::expr::Expr;
use stochrep::fd::{solve_backward, FdGrid};
use stochrep::geometry::{Cavity, FixedDomain, TimeVaryingDomain};
use stochrep::inverse::{cost_functional, synthetic_data, ShapeFamily, ShapeModel, TraceSolver};
use stochrep::observation::ObservationSpec;
use stochrep::problem::{CoefficientSet, Problem, SourceData};
use stochrep::sde::{Simulator, TraceRecorder};
use stochrep::Result;
use wasm_bindgen::prelude::*;

const HORIZON: f64 = 1.0;
const MARGIN: f64 = 0.05;
const FIELD_GRID: FdGrid = FdGrid::Polar { radial: 20, angular: 80, steps: 40 };
const DATA_GRID: FdGrid = FdGrid::Polar { radial: 24, angular: 96, steps: 32 };
const MODEL_GRID: FdGrid = FdGrid::Polar { radial: 16, angular: 64, steps: 24 };

fn problem() -> Problem {
    let data = SourceData::new(Expr::constant(0.0), Expr::constant(0.0), Expr::constant(1.0));
    Problem::new(CoefficientSet::isotropic(2, 0.5), data, HORIZON).expect("constant coefficients are valid")
}

fn scene(cx: f64, cy: f64, r: f64) -> Result<TimeVaryingDomain> {
    let cavity = Cavity::fixed([cx, cy, 0.0], r)?;
    TimeVaryingDomain::new(FixedDomain::unit_disk_half_robin(), Some(cavity), HORIZON, MARGIN)
}

/// Oracle values of `u(s, ·)` on an `n × n` raster of `[-1, 1]²`, row by
/// row from the top; NaN outside `D(s)`.
pub fn survival_raster(cx: f64, cy: f64, r: f64, s: f64, n: usize) -> Result<Vec<f64>> {
    let p = problem();
    let d = scene(cx, cy, r)?;
    let sol = solve_backward(&p, &d, &FIELD_GRID)?;
    let step = 2.0 / (n.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let x = [-1.0 + j as f64 * step, 1.0 - i as f64 * step, 0.0];
            out.push(if d.inside(s, &x) { sol.value_at(s, &x) } else { f64::NAN });
        }
    }
    Ok(out)
}

/// Sample paths from `(x0, y0)` at time 0 as `x, y` pairs, each path ended
/// by a NaN pair. The last point of a path is where it stopped or `T`.
pub fn path_polylines(cx: f64, cy: f64, r: f64, x0: f64, y0: f64, n_paths: usize, dt: f64, seed: u64) -> Result<Vec<f64>> {
    let p = problem();
    let d = scene(cx, cy, r)?;
    let cfg = McConfig::new(stochrep::sde::SimConfig::new(dt, seed), n_paths.max(2));
    let sim = Simulator::new(&p, &d, cfg.sim)?;
    let mut out = Vec::new();
    for k in 0..n_paths as u64 {
        let mut rec = TraceRecorder::default();
        sim.simulate_path_observed(0.0, &[x0, y0, 0.0], 0, k, &mut rec)?;
        for row in &rec.rows {
            out.extend([row.x[0], row.x[1]]);
        }
        out.extend([f64::NAN, f64::NAN]);
    }
    Ok(out)
}

/// `V(r)` on `n` radii in `[r_min, r_max]` for a cavity centred at
/// `(cx, cy)`, against noiseless data from radius `r_true` on a finer grid.
/// Radii that are not admissible give NaN.
pub fn misfit_curve(cx: f64, cy: f64, r_true: f64, r_min: f64, r_max: f64, n: usize) -> Result<Vec<f64>> {
    let p = problem();
    let family = ShapeFamily::RadiusAt { center: [cx, cy, 0.0] };
    let model = ShapeModel::new(family, FixedDomain::unit_disk_half_robin(), HORIZON, MARGIN, vec![r_min], vec![r_max])?;
    let spec = ObservationSpec::default_for(&model.base)?;
    let data = synthetic_data(&p, &model, &[r_true], &spec, &DATA_GRID)?.d;
    let solver = TraceSolver::Fd { grid: MODEL_GRID };
    let n = n.max(2);
    Ok((0..n)
        .map(|k| {
            let r = r_min + (r_max - r_min) * k as f64 / (n - 1) as f64;
            cost_functional(&p, &model, &[r], &data, &spec, &solver).map_or(f64::NAN, |c| c.value)
        })
        .collect())
}

fn js(e: stochrep::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = survivalRaster)]
pub fn survival_raster_js(cx: f64, cy: f64, r: f64, s: f64, n: usize) -> std::result::Result<Vec<f64>, JsError> {
    survival_raster(cx, cy, r, s, n).map_err(js)
}

#[wasm_bindgen(js_name = pathPolylines)]
#[allow(clippy::too_many_arguments)]
pub fn path_polylines_js(cx: f64, cy: f64, r: f64, x0: f64, y0: f64, n_paths: usize, dt: f64, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    path_polylines(cx, cy, r, x0, y0, n_paths, dt, seed as u64).map_err(js)
}

#[wasm_bindgen(js_name = misfitCurve)]
pub fn misfit_curve_js(cx: f64, cy: f64, r_true: f64, r_min: f64, r_max: f64, n: usize) -> std::result::Result<Vec<f64>, JsError> {
    misfit_curve(cx, cy, r_true, r_min, r_max, n).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_is_a_probability_and_blank_outside() {
        let v = survival_raster(0.0, -0.3, 0.2, 0.0, 21).unwrap();
        assert_eq!(v.len(), 441);
        assert!(v[0].is_nan());
        assert!(v.iter().filter(|x| !x.is_nan()).all(|x| (-1e-9..=1.0 + 1e-9).contains(x)));
        // Centre of the cavity.
        assert!(v[13 * 21 + 10].is_nan());
    }

    #[test]
    fn paths_stay_in_the_closed_disk() {
        let v = path_polylines(0.0, -0.3, 0.2, 0.0, 0.5, 5, 1e-2, 3).unwrap();
        assert_eq!(v.iter().filter(|x| x.is_nan()).count(), 10);
        for p in v.chunks(2).filter(|p| !p[0].is_nan()) {
            assert!(p[0].hypot(p[1]) <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn misfit_is_smallest_near_the_true_radius() {
        let v = misfit_curve(0.0, 0.0, 0.25, 0.1, 0.4, 7);
        let v = v.unwrap();
        let best = v.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, 3);
        assert!(v.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn inadmissible_cavity_is_an_error() {
        assert!(survival_raster(0.0, 0.0, 0.99, 0.0, 4).is_err());
    }
}
