//! Small direct solvers for banded systems.

use crate::{PdeError, Result};

/// Symmetric positive definite matrix stored as its lower band.
#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    /// `band[i * (bw + 1) + k]` holds entry `(i, i - k)`.
    band: Vec<f64>,
}

impl BandedCholesky {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, band: vec![0.0; n * (bw + 1)] }
    }

    /// Sets lower entry `(i, j)`, `j ≤ i`, `i - j ≤ bw`.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j <= i && i - j <= self.bw);
        self.band[i * (self.bw + 1) + (i - j)] = v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        if j > i || i - j > self.bw {
            0.0
        } else {
            self.band[i * (self.bw + 1) + (i - j)]
        }
    }

    pub fn factor(mut self) -> Result<Self> {
        let w = self.bw + 1;
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.bw);
            for j in j0..=i {
                let mut s = self.get(i, j);
                let k0 = j0.max(j.saturating_sub(self.bw));
                for k in k0..j {
                    s -= self.band[i * w + (i - k)] * self.band[j * w + (j - k)];
                }
                if j == i {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(PdeError::Singular(format!("pivot {i} is {s}")));
                    }
                    self.band[i * w] = s.sqrt();
                } else {
                    self.band[i * w + (i - j)] = s / self.band[j * w];
                }
            }
        }
        Ok(self)
    }

    /// Solves with a factor produced by [`BandedCholesky::factor`].
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let w = self.bw + 1;
        let mut y = b.to_vec();
        for i in 0..self.n {
            let mut s = y[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.band[i * w + (i - k)] * y[k];
            }
            y[i] = s / self.band[i * w];
        }
        for i in (0..self.n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + w).min(self.n) {
                s -= self.band[k * w + (k - i)] * y[k];
            }
            y[i] = s / self.band[i * w];
        }
        y
    }
}

/// Solves a tridiagonal system; `lower[0]` and `upper[n-1]` are ignored.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    for i in 0..n {
        let denom = if i == 0 { diag[0] } else { diag[i] - lower[i] * c[i - 1] };
        if denom.abs() < 1e-300 || !denom.is_finite() {
            return Err(PdeError::Singular(format!("tridiagonal pivot {i} is {denom}")));
        }
        c[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - if i == 0 { 0.0 } else { lower[i] * d[i - 1] }) / denom;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}
