//! One-dimensional heat equation on `[0, 1] × [0, 5]` with flux boundaries.
//!
//! Node-centred finite volumes (half cells at the walls, the same equations a
//! ghost-node scheme gives) and backward Euler. Boundary data are the
//! gradient fluxes `k u_x(0) = q_left` and `k u_x(1) = q_right`.

use mfgar::tensalg::DenseTensor;

use crate::linalg::solve_tridiagonal;
use crate::{PdeError, Result};

pub const T_END: f64 = 5.0;

/// Box pulse on `[0.25, 0.75]`, taking the midpoint value at the jumps.
pub fn initial_condition(x: f64) -> f64 {
    let step = |s: f64| if s > 0.0 { 1.0 } else if s < 0.0 { 0.0 } else { 0.5 };
    step(x - 0.25) - step(x - 0.75)
}

/// Trapezoid rule over a row of nodal values.
pub fn total_heat(row: &[f64], h: f64) -> f64 {
    let n = row.len() - 1;
    h * (row.iter().sum::<f64>() - 0.5 * (row[0] + row[n]))
}

/// Field on an `(n+1) × (n+1)` grid indexed `[t, x]`.
pub fn heat_field(flux_left: f64, flux_right: f64, conductivity: f64, n: usize) -> Result<DenseTensor> {
    if n < 2 {
        return Err(PdeError::InvalidSpec(format!("heat mesh {n} is too coarse")));
    }
    let h = 1.0 / n as f64;
    let dt = T_END / n as f64;
    let nn = n + 1;
    let r = conductivity * dt / (h * h);
    // cell widths: h inside, h/2 at the walls; rows scaled by width / h
    let mut lo = vec![-r; nn];
    let mut up = vec![-r; nn];
    let mut di = vec![1.0 + 2.0 * r; nn];
    di[0] = 0.5 + r;
    di[n] = 0.5 + r;
    lo[0] = 0.0;
    up[n] = 0.0;

    let mut out = vec![0.0; nn * nn];
    for j in 0..nn {
        out[j] = initial_condition(j as f64 * h);
    }
    for k in 1..nn {
        let prev = &out[(k - 1) * nn..k * nn];
        let mut rhs: Vec<f64> = prev.to_vec();
        rhs[0] = 0.5 * prev[0] - dt * flux_left / h;
        rhs[n] = 0.5 * prev[n] + dt * flux_right / h;
        let next = solve_tridiagonal(&lo, &di, &up, &rhs)?;
        out[k * nn..(k + 1) * nn].copy_from_slice(&next);
    }
    DenseTensor::new(vec![nn, nn], out).map_err(PdeError::from)
}
