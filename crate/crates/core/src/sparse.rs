//! Compressed sparse rows, ILU(0) and preconditioned BiCGStab.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

/// Row-by-row builder; entries within a row are summed by column and sorted.
#[derive(Debug, Default)]
pub struct CsrBuilder {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    scratch: Vec<(usize, f64)>,
}

impl CsrBuilder {
    pub fn new(n: usize, nnz_hint: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        Self { n, row_ptr, cols: Vec::with_capacity(nnz_hint), vals: Vec::with_capacity(nnz_hint), scratch: Vec::new() }
    }

    pub fn push(&mut self, col: usize, val: f64) {
        debug_assert!(col < self.n);
        self.scratch.push((col, val));
    }

    pub fn finish_row(&mut self) {
        self.scratch.sort_unstable_by_key(|e| e.0);
        let mut last: Option<usize> = None;
        for &(c, v) in &self.scratch {
            if last == Some(c) {
                *self.vals.last_mut().expect("nonempty row") += v;
            } else {
                self.cols.push(c);
                self.vals.push(v);
                last = Some(c);
            }
        }
        self.scratch.clear();
        self.row_ptr.push(self.cols.len());
    }

    pub fn build(self) -> Csr {
        assert_eq!(self.row_ptr.len(), self.n + 1, "every row must be finished");
        Csr { n: self.n, row_ptr: self.row_ptr, cols: self.cols, vals: self.vals }
    }
}

impl Csr {
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            y[i] = s;
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }
}

/// Incomplete LU with the sparsity pattern of the matrix.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    lu: Csr,
    diag: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &Csr) -> Result<Self> {
        let mut lu = a.clone();
        let n = a.n;
        let mut diag = vec![usize::MAX; n];
        for i in 0..n {
            for k in lu.row_ptr[i]..lu.row_ptr[i + 1] {
                if lu.cols[k] == i {
                    diag[i] = k;
                }
            }
            if diag[i] == usize::MAX {
                return Err(Error::Solver(format!("row {i} has no diagonal entry")));
            }
        }
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            let (start, end) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
            for k in start..end {
                pos[lu.cols[k]] = k;
            }
            for k in start..end {
                let j = lu.cols[k];
                if j >= i {
                    break;
                }
                let pivot = lu.vals[diag[j]];
                if pivot == 0.0 {
                    return Err(Error::Solver(format!("zero pivot in row {j}")));
                }
                let factor = lu.vals[k] / pivot;
                lu.vals[k] = factor;
                for kk in diag[j] + 1..lu.row_ptr[j + 1] {
                    let p = pos[lu.cols[kk]];
                    if p != usize::MAX {
                        lu.vals[p] -= factor * lu.vals[kk];
                    }
                }
            }
            for k in start..end {
                pos[lu.cols[k]] = usize::MAX;
            }
            if lu.vals[diag[i]] == 0.0 {
                return Err(Error::Solver(format!("zero pivot in row {i}")));
            }
        }
        Ok(Self { lu, diag })
    }

    /// Solves `LU z = r` in place.
    pub fn apply(&self, z: &mut [f64]) {
        let lu = &self.lu;
        for i in 0..lu.n {
            let mut s = z[i];
            for k in lu.row_ptr[i]..self.diag[i] {
                s -= lu.vals[k] * z[lu.cols[k]];
            }
            z[i] = s;
        }
        for i in (0..lu.n).rev() {
            let mut s = z[i];
            for k in self.diag[i] + 1..lu.row_ptr[i + 1] {
                s -= lu.vals[k] * z[lu.cols[k]];
            }
            z[i] = s / lu.vals[self.diag[i]];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Right-preconditioned BiCGStab; `x` holds the initial guess on entry.
/// Returns the number of iterations.
pub fn bicgstab(a: &Csr, pre: &Ilu0, b: &[f64], x: &mut [f64], rel_tol: f64, max_iter: usize) -> Result<usize> {
    let n = a.n;
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    if norm2(&r) <= rel_tol * bnorm {
        return Ok(0);
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return Err(Error::Solver("BiCGStab breakdown".into()));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        phat.copy_from_slice(&p);
        pre.apply(&mut phat);
        a.mul_vec(&phat, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) <= rel_tol * bnorm {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            return Ok(it);
        }
        shat.copy_from_slice(&s);
        pre.apply(&mut shat);
        a.mul_vec(&shat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt == 0.0 { 0.0 } else { dot(&t, &s) / tt };
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm2(&r) <= rel_tol * bnorm {
            return Ok(it);
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Solver("BiCGStab diverged".into()));
        }
    }
    Err(Error::Solver(format!("BiCGStab did not converge in {max_iter} iterations")))
}

/// Thomas algorithm for a tridiagonal system; `lower[0]` and
/// `upper[n-1]` are ignored.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(Error::Solver("singular tridiagonal system".into()));
    }
    c[0] = upper[0] / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Solver("singular tridiagonal system".into()));
        }
        c[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}
