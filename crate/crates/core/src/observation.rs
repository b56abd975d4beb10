//! Observation window Γ^ω ⊂ Γ′ and space-time trace matrices on it.

use std::f64::consts::FRAC_PI_4;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundaryClass, Dissection, EndCondition, FixedDomain, Point, Shape, TimeVaryingDomain};

/// Equal-arc-length midpoint nodes on an arc of Γ′ and a uniform time grid
/// on [0, T] including both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSpec {
    /// Arc parameters: angles on a disk, the endpoint coordinate (twice) on
    /// an interval.
    pub arc: [f64; 2],
    pub n_points: usize,
    pub n_times: usize,
}

impl ObservationSpec {
    /// Quarter circle centred on the middle of the Robin arc, 16 × 32; on an
    /// interval the first Robin end with 32 times.
    pub fn default_for(base: &FixedDomain) -> Result<Self> {
        match (base.shape(), base.dissection()) {
            (Shape::Disk { .. }, Dissection::Arc { start, end }) => {
                let mid = 0.5 * (start + end);
                let half = FRAC_PI_4.min(0.45 * (end - start));
                Ok(Self { arc: [mid - half, mid + half], n_points: 16, n_times: 32 })
            }
            (Shape::Interval { a, b }, Dissection::Ends { left, right }) => {
                let x = if *left == EndCondition::Robin {
                    *a
                } else if *right == EndCondition::Robin {
                    *b
                } else {
                    return Err(Error::Domain("no Robin end to observe".into()));
                };
                Ok(Self { arc: [x, x], n_points: 1, n_times: 32 })
            }
            _ => Err(Error::Unsupported("observation windows are defined on intervals and disks".into())),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let n = self.n_points.max(1);
        let span = self.arc[1] - self.arc[0];
        (0..n).map(|j| self.arc[0] + span * (j as f64 + 0.5) / n as f64).collect()
    }

    pub fn times(&self, horizon: f64) -> Vec<f64> {
        if self.n_times <= 1 {
            return vec![0.0];
        }
        let n = self.n_times - 1;
        (0..=n).map(|j| horizon * j as f64 / n as f64).collect()
    }

    /// Trapezoid weights on the time grid.
    pub fn time_weights(&self, horizon: f64) -> Vec<f64> {
        if self.n_times <= 1 {
            return vec![horizon];
        }
        let k = horizon / (self.n_times - 1) as f64;
        (0..self.n_times)
            .map(|j| if j == 0 || j + 1 == self.n_times { 0.5 * k } else { k })
            .collect()
    }

    /// Arc-length weights; a single unit weight on an interval endpoint.
    pub fn point_weights(&self, base: &FixedDomain) -> Vec<f64> {
        let n = self.n_points.max(1);
        match base.shape() {
            Shape::Disk { radius, .. } => vec![radius * (self.arc[1] - self.arc[0]) / n as f64; n],
            _ => vec![1.0; n],
        }
    }

    /// Boundary points of the window; every one must lie on Γ′.
    pub fn points(&self, domain: &TimeVaryingDomain) -> Result<Vec<Point>> {
        if self.n_points == 0 || self.n_times == 0 {
            return Err(Error::Shape("observation window needs at least one point and one time".into()));
        }
        if self.arc[1] < self.arc[0] {
            return Err(Error::Domain("observation arc must run counterclockwise".into()));
        }
        self.params()
            .into_iter()
            .map(|s| {
                let p = domain.base().boundary_point(s)?;
                match domain.classify_boundary(&p) {
                    BoundaryClass::Robin => Ok(p),
                    other => Err(Error::Domain(format!("observation point {s} lies on {other:?}, not on the Robin part"))),
                }
            })
            .collect()
    }
}

/// Values over times × window points, stored time-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationMatrix {
    pub times: Vec<f64>,
    pub params: Vec<f64>,
    pub values: Vec<f64>,
}

impl ObservationMatrix {
    pub fn new(times: Vec<f64>, params: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if values.len() != times.len() * params.len() {
            return Err(Error::Shape(format!(
                "{} values for {} times × {} points",
                values.len(),
                times.len(),
                params.len()
            )));
        }
        Ok(Self { times, params, values })
    }

    pub fn zeros_like(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], ..self.clone() }
    }

    #[inline]
    pub fn get(&self, time: usize, point: usize) -> f64 {
        self.values[time * self.params.len() + point]
    }

    /// Bilinear interpolation in `(t, param)`, clamped to the grid.
    pub fn interpolate(&self, t: f64, param: f64) -> f64 {
        let (i0, i1, wt) = bracket(&self.times, t);
        let (j0, j1, wp) = bracket(&self.params, param);
        let lo = (1.0 - wp) * self.get(i0, j0) + wp * self.get(i0, j1);
        let hi = (1.0 - wp) * self.get(i1, j0) + wp * self.get(i1, j1);
        (1.0 - wt) * lo + wt * hi
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.times.len() == other.times.len()
            && self.params.len() == other.params.len()
            && self.times.iter().zip(&other.times).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))
            && self.params.iter().zip(&other.params).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))
    }

    /// CSV with header `t,param,value`, time-major rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "param", "value"])?;
        for (i, t) in self.times.iter().enumerate() {
            for (j, s) in self.params.iter().enumerate() {
                w.write_record([t.to_string(), s.to_string(), self.get(i, j).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut rows: Vec<(f64, f64, f64)> = Vec::new();
        for rec in r.deserialize() {
            rows.push(rec?);
        }
        let mut times: Vec<f64> = Vec::new();
        let mut params: Vec<f64> = Vec::new();
        for &(t, s, _) in &rows {
            if times.last() != Some(&t) {
                times.push(t);
            }
            if times.len() == 1 {
                params.push(s);
            }
        }
        if rows.len() != times.len() * params.len() {
            return Err(Error::Shape("observation CSV is not a full time-major grid".into()));
        }
        for (k, &(t, s, _)) in rows.iter().enumerate() {
            if t != times[k / params.len()] || s != params[k % params.len()] {
                return Err(Error::Shape(format!("observation CSV row {} is out of order", k + 2)));
            }
        }
        let values = rows.into_iter().map(|r| r.2).collect();
        Self::new(times, params, values)
    }
}

/// Neighbouring indices and weight of `v` in a sorted grid.
fn bracket(grid: &[f64], v: f64) -> (usize, usize, f64) {
    let n = grid.len();
    if n == 1 || v <= grid[0] {
        return (0, 0, 0.0);
    }
    if v >= grid[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let hi = grid.partition_point(|g| *g <= v).min(n - 1);
    let lo = hi - 1;
    (lo, hi, (v - grid[lo]) / (grid[hi] - grid[lo]))
}
