//! Laplace equation on the unit square with Dirichlet borders and a pinned
//! center node, five-point stencil.

use mfgar::tensalg::DenseTensor;

use crate::linalg::BandedCholesky;
use crate::{PdeError, Result};

/// Node values on an `(n+1) × (n+1)` grid indexed `[y, x]`.
///
/// `values` are `[left, right, bottom, top, center]`. Corner nodes take the
/// mean of their two borders.
pub fn poisson_field(values: &[f64; 5], n: usize) -> Result<DenseTensor> {
    if n < 2 {
        return Err(PdeError::InvalidSpec(format!("poisson mesh {n} has no interior")));
    }
    let [left, right, bottom, top, center] = *values;
    let nn = n + 1;
    let mut u = vec![0.0; nn * nn];
    let at = |i: usize, j: usize| i * nn + j;
    for k in 0..nn {
        u[at(k, 0)] = left;
        u[at(k, n)] = right;
        u[at(0, k)] = bottom;
        u[at(n, k)] = top;
    }
    u[at(0, 0)] = 0.5 * (left + bottom);
    u[at(0, n)] = 0.5 * (right + bottom);
    u[at(n, 0)] = 0.5 * (left + top);
    u[at(n, n)] = 0.5 * (right + top);

    // interior unknowns, row-major; the center node is pinned
    let m = n - 1;
    let pin = (n / 2 - 1) * m + (n / 2 - 1);
    let pinned_node = (n / 2, n / 2);
    let mut sys = BandedCholesky::zeros(m * m, m);
    let mut rhs = vec![0.0; m * m];
    for i in 1..n {
        for j in 1..n {
            let r = (i - 1) * m + (j - 1);
            if r == pin {
                sys.set(r, r, 1.0);
                rhs[r] = center;
                continue;
            }
            sys.set(r, r, 4.0);
            for (ni, nj) in [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)] {
                if ni == 0 || nj == 0 || ni == n || nj == n {
                    rhs[r] += u[at(ni, nj)];
                } else if (ni, nj) == pinned_node {
                    rhs[r] += center;
                } else {
                    let c = (ni - 1) * m + (nj - 1);
                    if c < r {
                        sys.set(r, c, -1.0);
                    }
                }
            }
        }
    }
    let sol = sys.factor()?.solve(&rhs);
    for i in 1..n {
        for j in 1..n {
            u[at(i, j)] = sol[(i - 1) * m + (j - 1)];
        }
    }
    DenseTensor::new(vec![nn, nn], u).map_err(PdeError::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_data_give_a_constant_field() {
        for n in [8, 16, 32] {
            let f = poisson_field(&[0.37; 5], n).unwrap();
            assert!(f.data().iter().all(|v| (v - 0.37).abs() < 1e-10));
        }
    }

    /// Every node, interior or not, as one dense system.
    fn dense_solve(values: &[f64; 5], n: usize) -> Vec<f64> {
        let nn = n + 1;
        let total = nn * nn;
        let mut a = DMatrix::zeros(total, total);
        let mut b = DVector::zeros(total);
        let [l, r, bo, t, c] = *values;
        for i in 0..nn {
            for j in 0..nn {
                let k = i * nn + j;
                a[(k, k)] = 1.0;
                let edge = |v: bool| if v { 1.0 } else { 0.0 };
                let on = (edge(j == 0) * l + edge(j == n) * r + edge(i == 0) * bo + edge(i == n) * t)
                    / (edge(j == 0) + edge(j == n) + edge(i == 0) + edge(i == n)).max(1.0);
                if i == 0 || j == 0 || i == n || j == n {
                    b[k] = on;
                } else if i == n / 2 && j == n / 2 {
                    b[k] = c;
                } else {
                    a[(k, k)] = -4.0;
                    for kk in [k - nn, k + nn, k - 1, k + 1] {
                        a[(k, kk)] = 1.0;
                    }
                }
            }
        }
        a.lu().solve(&b).unwrap().as_slice().to_vec()
    }

    #[test]
    fn matches_a_dense_solve_of_the_same_stencil() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [4, 8, 10] {
            let v: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            let got = poisson_field(&v, n).unwrap();
            for (a, b) in got.data().iter().zip(dense_solve(&v, n)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn swapping_left_and_right_mirrors_the_field() {
        let v = [0.2, 0.8, 0.4, 0.6, 0.3];
        let a = poisson_field(&v, 16).unwrap();
        let b = poisson_field(&[0.8, 0.2, 0.4, 0.6, 0.3], 16).unwrap();
        for i in 0..17 {
            for j in 0..17 {
                assert!((a.get(&[i, j]) - b.get(&[i, 16 - j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn discrete_maximum_principle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let v: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let f = poisson_field(&v, 16).unwrap();
            assert!(f.data().iter().all(|x| *x >= lo - 1e-12 && *x <= hi + 1e-12));
        }
    }

    #[test]
    fn interior_is_discrete_harmonic() {
        let f = poisson_field(&[0.1, 0.9, 0.5, 0.3, 0.7], 12).unwrap();
        for i in 1..12 {
            for j in 1..12 {
                if (i, j) == (6, 6) {
                    assert_eq!(f.get(&[i, j]), 0.7);
                    continue;
                }
                let lap = f.get(&[i - 1, j]) + f.get(&[i + 1, j]) + f.get(&[i, j - 1]) + f.get(&[i, j + 1]) - 4.0 * f.get(&[i, j]);
                assert!(lap.abs() < 1e-12);
            }
        }
    }
}
