use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::tensor::DenseTensor;
use crate::error::{shape_err, Error, Result};

/// Symmetric eigendecomposition `A = U diag(values) Uᵀ`, values descending.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SymEigen {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.values) * self.vectors.transpose()
    }

    /// Eigenvalues with roundoff negatives clamped to zero.
    pub fn clamped_values(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v.max(0.0)).collect()
    }
}

const SYMMETRY_TOL: f64 = 1e-10;

pub fn sym_eig(matrix: &DMatrix<f64>) -> Result<SymEigen> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return shape_err(format!("sym_eig needs a square matrix, got {:?}", matrix.shape()));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to sym_eig".into()));
    }
    let scale = matrix.amax().max(1.0);
    let asym = (matrix - matrix.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let sym = (matrix + matrix.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Conditioning("eigendecomposition produced non-finite values".into()));
    }
    Ok(SymEigen { vectors, values })
}

/// Eigendecompositions of the Kronecker factors `K, S_1, .., S_M` in mode order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EigenFactors {
    pub factors: Vec<SymEigen>,
}

impl EigenFactors {
    pub fn new(factors: Vec<SymEigen>) -> Self {
        Self { factors }
    }

    pub fn from_matrices(mats: &[&DMatrix<f64>]) -> Result<Self> {
        Ok(Self {
            factors: mats.iter().map(|m| sym_eig(m)).collect::<Result<_>>()?,
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.dim()).collect()
    }

    /// Eigenvalues of the Kronecker product as a tensor of the joint shape.
    pub fn joint_values(&self) -> DenseTensor {
        let vals: Vec<Vec<f64>> = self.factors.iter().map(|f| f.clamped_values()).collect();
        DenseTensor::from_fn(&self.shape(), |idx| {
            idx.iter().zip(&vals).map(|(&i, v)| v[i]).product()
        })
    }

    /// Joint eigenvalues with factor `skip` left out (set to one).
    pub fn joint_values_except(&self, skip: usize) -> DenseTensor {
        let vals: Vec<Vec<f64>> = self.factors.iter().map(|f| f.clamped_values()).collect();
        DenseTensor::from_fn(&self.shape(), |idx| {
            idx.iter()
                .zip(&vals)
                .enumerate()
                .filter(|(m, _)| *m != skip)
                .map(|(_, (&i, v))| v[i])
                .product()
        })
    }

    /// `T ×_m U_mᵀ` over every mode.
    pub fn rotate_in(&self, t: &DenseTensor) -> Result<DenseTensor> {
        let mut out = t.clone();
        for (m, f) in self.factors.iter().enumerate() {
            out = out.mode_product_t(m, &f.vectors)?;
        }
        Ok(out)
    }

    /// `T ×_m U_m` over every mode.
    pub fn rotate_out(&self, t: &DenseTensor) -> Result<DenseTensor> {
        let mut out = t.clone();
        for (m, f) in self.factors.iter().enumerate() {
            out = out.mode_product(m, &f.vectors)?;
        }
        Ok(out)
    }
}

/// `(A_0 ⊗ .. ⊗ A_M + noise·I)` held through the eigendecompositions of its factors.
#[derive(Clone, Debug)]
pub struct KronSystem {
    pub eigs: EigenFactors,
    pub noise: f64,
    /// Joint eigenvalues plus noise.
    pub denom: DenseTensor,
}

impl KronSystem {
    pub fn new(eigs: EigenFactors, noise: f64) -> Result<Self> {
        if !(noise > 0.0) || !noise.is_finite() {
            return Err(Error::InvalidParameter(format!("noise must be positive, got {noise}")));
        }
        let denom = eigs.joint_values().map(|v| v + noise);
        Ok(Self { eigs, noise, denom })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.eigs.shape()
    }

    fn check(&self, y: &DenseTensor) -> Result<()> {
        if y.shape() != self.denom.shape() {
            return shape_err(format!(
                "tensor {:?} does not match Kronecker shape {:?}",
                y.shape(),
                self.denom.shape()
            ));
        }
        Ok(())
    }

    pub fn logdet(&self) -> f64 {
        self.denom.data().iter().map(|d| d.ln()).sum()
    }

    /// `Σ⁻¹ vec(Y)` returned as a tensor.
    pub fn solve(&self, y: &DenseTensor) -> Result<DenseTensor> {
        self.check(y)?;
        let t = self.eigs.rotate_in(y)?;
        let t = t.zip_map(&self.denom, |a, d| a / d)?;
        self.eigs.rotate_out(&t)
    }

    /// `vec(Y)ᵀ Σ⁻¹ vec(Y)` and the solve `Σ⁻¹ vec(Y)`.
    pub fn quad_and_solve(&self, y: &DenseTensor) -> Result<(f64, DenseTensor)> {
        self.check(y)?;
        let t = self.eigs.rotate_in(y)?;
        let quad = t
            .data()
            .iter()
            .zip(self.denom.data())
            .map(|(a, d)| a * a / d)
            .sum();
        let scaled = t.zip_map(&self.denom, |a, d| a / d)?;
        Ok((quad, self.eigs.rotate_out(&scaled)?))
    }

    /// Per-factor weights `g_m[i] = Σ_{joint idx with i_m = i} Π_{k≠m} λ_k / D`,
    /// so that `tr(Σ⁻¹ (.. ⊗ dA_m ⊗ ..)) = tr(U_mᵀ dA_m U_m diag(g_m))`.
    pub fn trace_weights(&self, mode: usize) -> Result<Vec<f64>> {
        let other = self.eigs.joint_values_except(mode);
        let ratio = other.zip_map(&self.denom, |a, d| a / d)?;
        Ok(ratio.unfold(mode).column_sum().iter().copied().collect())
    }

    /// `dΣ`-coefficient of `tr(Σ⁻¹ dΣ)` for factor `mode`: `U diag(g) Uᵀ`.
    pub fn trace_grad(&self, mode: usize) -> Result<DMatrix<f64>> {
        let g = self.trace_weights(mode)?;
        let u = &self.eigs.factors[mode].vectors;
        Ok(u * DMatrix::from_diagonal(&DVector::from_vec(g)) * u.transpose())
    }

    /// `Σ_v w_v ∂(vᵀ Σ v)/∂A_mode`, treating every factor entry as free.
    pub fn quadform_grad(&self, mode: usize, vecs: &[(f64, &DenseTensor)], factors: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
        let d = self.eigs.factors[mode].dim();
        let mut out = DMatrix::zeros(d, d);
        for (w, v) in vecs {
            let mut applied = (*v).clone();
            for (m, f) in factors.iter().enumerate() {
                if m != mode {
                    applied = applied.mode_product(m, f)?;
                }
            }
            out += v.unfold(mode) * applied.unfold(mode).transpose() * *w;
        }
        Ok(out)
    }

    /// Gradient of `½ logdet Σ + ½ yᵀΣ⁻¹y` with respect to factor matrix `mode`,
    /// treating every entry as free. `alpha = Σ⁻¹ y`.
    pub fn factor_grad(&self, mode: usize, alpha: &DenseTensor, factors: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
        let trace_part = self.trace_grad(mode)?;
        let quad_part = self.quadform_grad(mode, &[(1.0, alpha)], factors)?;
        Ok((trace_part - quad_part) * 0.5)
    }

    /// Gradient of the same objective with respect to the noise variance.
    pub fn noise_grad(&self, alpha: &DenseTensor) -> f64 {
        let tr: f64 = self.denom.data().iter().map(|d| 1.0 / d).sum();
        0.5 * (tr - alpha.norm_sq())
    }
}

/// `vec(Y)ᵀ(⊗A + noise·I)⁻¹vec(Y)` and `log|⊗A + noise·I|` through the eigenbasis.
pub fn kron_quad_and_logdet(eigs: &EigenFactors, noise: f64, y: &DenseTensor) -> Result<(f64, f64)> {
    let sys = KronSystem::new(eigs.clone(), noise)?;
    let (quad, _) = sys.quad_and_solve(y)?;
    Ok((quad, sys.logdet()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tensalg::tensor::kron_all;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    /// Dense `yᵀΣ⁻¹y` and `log|Σ|` through a Cholesky factorization.
    pub(crate) fn dense_quad_logdet(sigma: &DMatrix<f64>, y: &DVector<f64>) -> (f64, f64) {
        let chol = sigma.clone().cholesky().expect("dense oracle needs SPD");
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = y.dot(&chol.solve(y));
        (quad, logdet)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn identity_has_unit_values() {
        let e = sym_eig(&DMatrix::identity(4, 4)).unwrap();
        assert!(e.values.iter().all(|&v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn diagonal_sorted_descending() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        let e = sym_eig(&m).unwrap();
        assert_eq!(e.values.as_slice(), &[3.0, 1.0]);
        assert!((e.vectors[(1, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((e.vectors[(0, 1)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn spd_reconstruction_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_spd(&mut rng, 5);
        let e = sym_eig(&a).unwrap();
        assert!((e.reconstruct() - &a).norm() / a.norm() < 1e-8);
        let utu = e.vectors.transpose() * &e.vectors;
        assert!((utu - DMatrix::identity(5, 5)).amax() < 1e-8);
        assert!(e.values.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rejects_bad_input() {
        let mut m = DMatrix::identity(2, 2);
        m[(0, 1)] = 1e-3;
        assert!(matches!(sym_eig(&m), Err(Error::NotSymmetric(_))));
        m[(0, 1)] = f64::NAN;
        assert!(matches!(sym_eig(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn scaled_identity_case() {
        let eigs = EigenFactors::from_matrices(&[&DMatrix::identity(2, 2), &DMatrix::identity(3, 3)]).unwrap();
        let y = DenseTensor::from_fn(&[2, 3], |i| (i[0] * 3 + i[1]) as f64 - 2.0);
        let (quad, logdet) = kron_quad_and_logdet(&eigs, 1.0, &y).unwrap();
        assert!((quad - y.norm_sq() / 2.0).abs() < 1e-12);
        assert!((logdet - 6.0 * 2f64.ln()).abs() < 1e-12);
        let zero = DenseTensor::zeros(&[2, 3]);
        assert_eq!(kron_quad_and_logdet(&eigs, 1.0, &zero).unwrap().0, 0.0);
    }

    #[test]
    fn nonpositive_noise_rejected() {
        let eigs = EigenFactors::from_matrices(&[&DMatrix::identity(2, 2)]).unwrap();
        assert!(kron_quad_and_logdet(&eigs, 0.0, &DenseTensor::zeros(&[2])).is_err());
    }

    #[test]
    fn matches_dense_three_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = random_spd(&mut rng, 4);
        let s1 = random_spd(&mut rng, 2);
        let s2 = random_spd(&mut rng, 3);
        let y = DenseTensor::from_fn(&[4, 2, 3], |_| rng.random_range(-1.0..1.0));
        let eigs = EigenFactors::from_matrices(&[&k, &s1, &s2]).unwrap();
        let (quad, logdet) = kron_quad_and_logdet(&eigs, 0.3, &y).unwrap();
        let sigma = kron_all(&[&k, &s1, &s2]) + DMatrix::identity(24, 24) * 0.3;
        let (dq, dl) = dense_quad_logdet(&sigma, &y.vec());
        assert!(rel(quad, dq) < 1e-8);
        assert!(rel(logdet, dl) < 1e-8);
    }

    #[test]
    fn factor_and_noise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mats = vec![random_spd(&mut rng, 3), random_spd(&mut rng, 2), random_spd(&mut rng, 2)];
        let y = DenseTensor::from_fn(&[3, 2, 2], |_| rng.random_range(-1.0..1.0));
        let noise = 0.2;
        let obj = |mats: &[DMatrix<f64>], noise: f64| {
            let refs: Vec<&DMatrix<f64>> = mats.iter().collect();
            let (q, l) = kron_quad_and_logdet(&EigenFactors::from_matrices(&refs).unwrap(), noise, &y).unwrap();
            0.5 * (q + l)
        };
        let refs: Vec<&DMatrix<f64>> = mats.iter().collect();
        let sys = KronSystem::new(EigenFactors::from_matrices(&refs).unwrap(), noise).unwrap();
        let (_, alpha) = sys.quad_and_solve(&y).unwrap();
        let eps = 1e-6;
        for m in 0..3 {
            let g = sys.factor_grad(m, &alpha, &refs).unwrap();
            for i in 0..mats[m].nrows() {
                for j in 0..=i {
                    // perturb symmetrically; gradient pairs add up
                    let mut p = mats.clone();
                    p[m][(i, j)] += eps;
                    if i != j {
                        p[m][(j, i)] += eps;
                    }
                    let mut q = mats.clone();
                    q[m][(i, j)] -= eps;
                    if i != j {
                        q[m][(j, i)] -= eps;
                    }
                    let fd = (obj(&p, noise) - obj(&q, noise)) / (2.0 * eps);
                    let an = if i == j { g[(i, i)] } else { g[(i, j)] + g[(j, i)] };
                    assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "mode {m} ({i},{j}): {fd} vs {an}");
                }
            }
        }
        let fd = (obj(&mats, noise + eps) - obj(&mats, noise - eps)) / (2.0 * eps);
        assert!((fd - sys.noise_grad(&alpha)).abs() < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn agrees_with_dense_cholesky(seed in 0u64..1000, n in 1usize..=6, d1 in 1usize..=4, d2 in 1usize..=4, noise in 0.01f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_spd(&mut rng, n);
            let s1 = random_spd(&mut rng, d1);
            let s2 = random_spd(&mut rng, d2);
            let y = DenseTensor::from_fn(&[n, d1, d2], |_| rng.random_range(-2.0..2.0));
            let eigs = EigenFactors::from_matrices(&[&k, &s1, &s2]).unwrap();
            let (quad, logdet) = kron_quad_and_logdet(&eigs, noise, &y).unwrap();
            let dim = n * d1 * d2;
            let sigma = kron_all(&[&k, &s1, &s2]) + DMatrix::identity(dim, dim) * noise;
            let (dq, dl) = dense_quad_logdet(&sigma, &y.vec());
            proptest::prop_assert!(rel(quad, dq) <= 1e-8);
            proptest::prop_assert!((logdet - dl).abs() <= 1e-8 * dl.abs().max(1.0));
        }

        #[test]
        fn logdet_increases_with_noise(seed in 0u64..1000, noise in 0.01f64..2.0, bump in 1e-3f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eigs = EigenFactors::from_matrices(&[&random_spd(&mut rng, 3), &random_spd(&mut rng, 2)]).unwrap();
            let y = DenseTensor::zeros(&[3, 2]);
            let (_, a) = kron_quad_and_logdet(&eigs, noise, &y).unwrap();
            let (_, b) = kron_quad_and_logdet(&eigs, noise + bump, &y).unwrap();
            proptest::prop_assert!(b > a);
        }
    }
}
