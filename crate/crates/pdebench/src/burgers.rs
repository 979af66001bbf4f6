//! Viscous Burgers equation on `[0, 1] × [0, 3]`: linear finite elements in
//! space, backward Euler in time, Picard sweeps with a Newton fallback.

use std::f64::consts::FRAC_PI_2;

use mfgar::tensalg::DenseTensor;

use crate::linalg::solve_tridiagonal;
use crate::{PdeError, Result};

pub const T_END: f64 = 3.0;
pub const PICARD_TOL: f64 = 1e-8;
pub const MAX_SWEEPS: usize = 50;

pub fn initial_condition(x: f64) -> f64 {
    (FRAC_PI_2 * x).sin()
}

/// Tridiagonal system for the interior unknowns `1..n`.
struct Tri {
    lo: Vec<f64>,
    di: Vec<f64>,
    up: Vec<f64>,
}

impl Tri {
    fn apply(&self, u: &[f64]) -> Vec<f64> {
        let m = u.len();
        (0..m)
            .map(|i| {
                let mut s = self.di[i] * u[i];
                if i > 0 {
                    s += self.lo[i] * u[i - 1];
                }
                if i + 1 < m {
                    s += self.up[i] * u[i + 1];
                }
                s
            })
            .collect()
    }
}

/// One backward-Euler step for interior values `u_old` (zero Dirichlet data).
struct Step<'a> {
    u_old: &'a [f64],
    h: f64,
    dt: f64,
    nu: f64,
}

impl Step<'_> {
    fn at(u: &[f64], i: isize) -> f64 {
        if i < 0 || i as usize >= u.len() {
            0.0
        } else {
            u[i as usize]
        }
    }

    /// `M + dt (ν K + N(a))` with the convection lagged at `a`.
    fn picard_matrix(&self, a: &[f64]) -> Tri {
        let m = a.len();
        let (h, dt, nu) = (self.h, self.dt, self.nu);
        let mut t = Tri { lo: vec![0.0; m], di: vec![0.0; m], up: vec![0.0; m] };
        for i in 0..m {
            let ii = i as isize;
            let (am, a0, ap) = (Self::at(a, ii - 1), a[i], Self::at(a, ii + 1));
            t.di[i] = 4.0 * h / 6.0 + dt * (2.0 * nu / h + (am - ap) / 6.0);
            t.lo[i] = h / 6.0 + dt * (-nu / h - (a0 / 3.0 + am / 6.0));
            t.up[i] = h / 6.0 + dt * (-nu / h + (a0 / 3.0 + ap / 6.0));
        }
        t
    }

    fn mass_rhs(&self) -> Vec<f64> {
        let h = self.h;
        let u = self.u_old;
        (0..u.len())
            .map(|i| {
                let ii = i as isize;
                h / 6.0 * (Self::at(u, ii - 1) + 4.0 * u[i] + Self::at(u, ii + 1))
            })
            .collect()
    }

    fn residual(&self, u: &[f64], rhs: &[f64]) -> Vec<f64> {
        let au = self.picard_matrix(u).apply(u);
        au.iter().zip(rhs).map(|(a, b)| a - b).collect()
    }

    fn jacobian(&self, u: &[f64]) -> Tri {
        let m = u.len();
        let (h, dt, nu) = (self.h, self.dt, self.nu);
        let mut t = Tri { lo: vec![0.0; m], di: vec![0.0; m], up: vec![0.0; m] };
        for i in 0..m {
            let ii = i as isize;
            let (um, u0, up) = (Self::at(u, ii - 1), u[i], Self::at(u, ii + 1));
            t.di[i] = 4.0 * h / 6.0 + dt * (2.0 * nu / h + (up - um) / 6.0);
            t.lo[i] = h / 6.0 + dt * (-nu / h - (um / 3.0 + u0 / 6.0));
            t.up[i] = h / 6.0 + dt * (-nu / h + (u0 / 6.0 + up / 3.0));
        }
        t
    }

    fn converged(delta: &[f64], u: &[f64]) -> bool {
        let d = delta.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let s = u.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        d <= PICARD_TOL * s
    }

    fn solve(&self) -> Result<Vec<f64>> {
        let rhs = self.mass_rhs();
        let mut u = self.u_old.to_vec();
        for _ in 0..MAX_SWEEPS {
            let t = self.picard_matrix(&u);
            let next = solve_tridiagonal(&t.lo, &t.di, &t.up, &rhs)?;
            let delta: Vec<f64> = next.iter().zip(&u).map(|(a, b)| a - b).collect();
            let finite = next.iter().all(|x| x.is_finite());
            if finite {
                u = next;
                if Self::converged(&delta, &u) {
                    return Ok(u);
                }
            } else {
                break;
            }
        }
        self.newton(self.u_old.to_vec(), &rhs)
    }

    /// Damped Newton on the same discrete equations.
    fn newton(&self, mut u: Vec<f64>, rhs: &[f64]) -> Result<Vec<f64>> {
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut r = self.residual(&u, rhs);
        for _ in 0..MAX_SWEEPS {
            let j = self.jacobian(&u);
            let delta = solve_tridiagonal(&j.lo, &j.di, &j.up, &r)?;
            let r0 = norm(&r);
            let mut step = 1.0;
            loop {
                let trial: Vec<f64> = u.iter().zip(&delta).map(|(a, d)| a - step * d).collect();
                let rt = self.residual(&trial, rhs);
                if norm(&rt) < r0 || step < 1e-4 {
                    u = trial;
                    r = rt;
                    break;
                }
                step *= 0.5;
            }
            if Self::converged(&delta, &u) && step == 1.0 {
                return Ok(u);
            }
        }
        Err(PdeError::Nonconvergent(format!("burgers step did not converge (nu = {})", self.nu)))
    }
}

/// Field on an `(n+1) × (n+1)` grid indexed `[t, x]`.
pub fn burgers_field(viscosity: f64, n: usize) -> Result<DenseTensor> {
    if n < 2 {
        return Err(PdeError::InvalidSpec(format!("burgers mesh {n} has no interior")));
    }
    let h = 1.0 / n as f64;
    let dt = T_END / n as f64;
    let nn = n + 1;
    let mut out = vec![0.0; nn * nn];
    for j in 0..nn {
        out[j] = initial_condition(if j == n { 1.0 } else { j as f64 * h });
    }
    let mut u: Vec<f64> = out[1..n].to_vec();
    for k in 1..nn {
        u = Step { u_old: &u, h, dt, nu: viscosity }.solve()?;
        out[k * nn + 1..k * nn + n].copy_from_slice(&u);
    }
    DenseTensor::new(vec![nn, nn], out).map_err(PdeError::from)
}
