//! ARD squared-exponential kernels, latent-coordinate output covariances and
//! the Laplace sparsity prior on latent coordinates.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// `θ₀·exp(−Σ_k (x_k − x'_k)² / θ_k²)`, stored as logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArdKernelParams {
    pub log_amplitude: f64,
    pub log_lengthscales: Vec<f64>,
}

impl ArdKernelParams {
    pub fn new(amplitude: f64, lengthscales: &[f64]) -> Result<Self> {
        if !(amplitude > 0.0) || lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidParameter(
                "kernel amplitude and lengthscales must be positive".into(),
            ));
        }
        Ok(Self {
            log_amplitude: amplitude.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
        })
    }

    pub fn isotropic(dim: usize, amplitude: f64, lengthscale: f64) -> Self {
        Self {
            log_amplitude: amplitude.ln(),
            log_lengthscales: vec![lengthscale.ln(); dim],
        }
    }

    pub fn amplitude(&self) -> f64 {
        self.log_amplitude.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    fn check(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return shape_err(format!(
                "inputs have {} columns but the kernel has {} lengthscales",
                cols,
                self.dim()
            ));
        }
        if !self.log_amplitude.is_finite() || self.log_lengthscales.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("kernel parameters".into()));
        }
        Ok(())
    }

    /// Prior variance `k(x, x)`.
    pub fn diag_value(&self) -> f64 {
        self.amplitude()
    }
}

/// Gram matrix between the rows of `x1` and `x2`.
pub fn ard_gram(params: &ArdKernelParams, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    params.check(x1.ncols())?;
    params.check(x2.ncols())?;
    let amp = params.amplitude();
    let inv: Vec<f64> = params.lengthscales().iter().map(|l| 1.0 / (l * l)).collect();
    Ok(DMatrix::from_fn(x1.nrows(), x2.nrows(), |i, j| {
        let mut s = 0.0;
        for (k, w) in inv.iter().enumerate() {
            let d = x1[(i, k)] - x2[(j, k)];
            s += d * d * w;
        }
        amp * (-s).exp()
    }))
}

/// Gradients of `Σ_ij G_ij K(x_i, x'_j)` for `K = ard_gram(params, x1, x2)`.
#[derive(Clone, Debug)]
pub struct GramGrads {
    pub log_amplitude: f64,
    pub log_lengthscales: Vec<f64>,
}

pub fn ard_gram_grads(
    params: &ArdKernelParams,
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    upstream: &DMatrix<f64>,
) -> GramGrads {
    let inv: Vec<f64> = params.lengthscales().iter().map(|l| 1.0 / (l * l)).collect();
    let mut d_amp = 0.0;
    let mut d_ls = vec![0.0; inv.len()];
    for i in 0..x1.nrows() {
        for j in 0..x2.nrows() {
            let gk = upstream[(i, j)] * gram[(i, j)];
            if gk == 0.0 {
                continue;
            }
            d_amp += gk;
            for (k, w) in inv.iter().enumerate() {
                let d = x1[(i, k)] - x2[(j, k)];
                d_ls[k] += gk * 2.0 * d * d * w;
            }
        }
    }
    GramGrads {
        log_amplitude: d_amp,
        log_lengthscales: d_ls,
    }
}

/// Gradient of `Σ_ij G_ij K(v_i, v_j)` with respect to the coordinates `v` of a
/// symmetric Gram `K = ard_gram(params, v, v)`.
pub fn ard_gram_coord_grad(
    params: &ArdKernelParams,
    coords: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    upstream: &DMatrix<f64>,
) -> DMatrix<f64> {
    let inv: Vec<f64> = params.lengthscales().iter().map(|l| 1.0 / (l * l)).collect();
    let n = coords.nrows();
    let mut out = DMatrix::zeros(n, coords.ncols());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = (upstream[(i, j)] + upstream[(j, i)]) * gram[(i, j)];
            for (a, ia) in inv.iter().enumerate() {
                out[(i, a)] += w * (-2.0 * (coords[(i, a)] - coords[(j, a)]) * ia);
            }
        }
    }
    out
}

/// Latent coordinates for one output mode together with their kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeFeatures {
    pub coords: DMatrix<f64>,
    pub kernel: ArdKernelParams,
}

/// Per-mode latent coordinates `V_m` (d_m × r) whose Gram matrices are the
/// output covariances `S_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFeatures {
    pub modes: Vec<ModeFeatures>,
}

/// Default latent rank for a mode of size `d`.
pub fn default_rank(d: usize) -> usize {
    d.clamp(1, 2)
}

impl LatentFeatures {
    /// Seeded `0.1·N(0, 1)` coordinates with unit kernels.
    pub fn init(sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = sizes
            .iter()
            .map(|&d| {
                let r = default_rank(d);
                let coords = DMatrix::from_fn(d, r, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    0.1 * z
                });
                ModeFeatures {
                    coords,
                    kernel: ArdKernelParams::isotropic(r, 1.0, 1.0),
                }
            })
            .collect();
        Self { modes }
    }

    /// Coordinates chosen so every `S_m` is the identity for any kernel.
    pub fn identity(sizes: &[usize]) -> Self {
        let modes = sizes
            .iter()
            .map(|&d| ModeFeatures {
                coords: DMatrix::identity(d, d) * 1e3,
                kernel: ArdKernelParams::isotropic(d, 1.0, 1.0),
            })
            .collect();
        Self { modes }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.modes.iter().map(|m| m.coords.nrows()).collect()
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
}

/// Output covariance `S_m` for one mode.
pub fn output_cov(features: &LatentFeatures, mode: usize) -> Result<DMatrix<f64>> {
    let Some(f) = features.modes.get(mode) else {
        return shape_err(format!("mode {} out of range ({} modes)", mode, features.len()));
    };
    ard_gram(&f.kernel, &f.coords, &f.coords)
}

/// `exp(−λ‖v‖₁)` prior on every latent coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplacePrior {
    pub scale: f64,
}

impl LaplacePrior {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::InvalidParameter("Laplace scale must be positive".into()));
        }
        Ok(Self { scale })
    }
}

/// `−λ Σ |v|` over all latent coordinates (unnormalized log density).
pub fn laplace_log_prior(features: &LatentFeatures, prior: &LaplacePrior) -> f64 {
    -prior.scale
        * features
            .modes
            .iter()
            .map(|m| m.coords.iter().map(|v| v.abs()).sum::<f64>())
            .sum::<f64>()
}
