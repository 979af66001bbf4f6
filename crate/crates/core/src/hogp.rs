//! Single-fidelity tensor-variate GP with covariance `K ⊗ S_1 ⊗ .. ⊗ S_M + σ²I`.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{
    ard_gram, ard_gram_coord_grad, ard_gram_grads, output_cov, ArdKernelParams, LatentFeatures,
};
use crate::optim::{minimize, OptimConfig, TraceEntry};
use crate::tensalg::{sym_eig, DenseTensor, EigenFactors, KronSystem, SymEigen, TuckerWeights};

/// Floor added to every noise variance.
pub const JITTER: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

thread_local! {
    static OUTPUT_FACTORIZATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of output-covariance eigendecompositions done on this thread.
pub fn output_factorization_count() -> usize {
    OUTPUT_FACTORIZATIONS.with(|c| c.get())
}

pub fn reset_output_factorization_count() {
    OUTPUT_FACTORIZATIONS.with(|c| c.set(0));
}

pub(crate) fn output_eig(s: &DMatrix<f64>) -> Result<SymEigen> {
    OUTPUT_FACTORIZATIONS.with(|c| c.set(c.get() + 1));
    sym_eig(s)
}

pub(crate) fn noise_from_log(log_noise: f64) -> f64 {
    JITTER + log_noise.exp()
}

/// Hyperparameters of one tensor GP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TgpParams {
    pub input_kernel: ArdKernelParams,
    pub features: LatentFeatures,
    pub log_noise: f64,
}

impl TgpParams {
    pub fn noise(&self) -> f64 {
        noise_from_log(self.log_noise)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.features.sizes()
    }

    pub fn output_covs(&self) -> Result<Vec<DMatrix<f64>>> {
        (0..self.features.len()).map(|m| output_cov(&self.features, m)).collect()
    }

    /// Pushes the parameters selected by `mask` onto `out`.
    pub fn pack(&self, mask: &TgpMask, out: &mut Vec<f64>) {
        if mask.input_kernel {
            out.push(self.input_kernel.log_amplitude);
            out.extend_from_slice(&self.input_kernel.log_lengthscales);
        }
        if mask.noise {
            out.push(self.log_noise);
        }
        for f in self.features.modes.iter().filter(|f| f.coords.nrows() > 1) {
            if mask.coords {
                out.extend(f.coords.iter());
            }
            if mask.output_kernel {
                out.extend_from_slice(&f.kernel.log_lengthscales);
            }
        }
    }

    /// Reads parameters selected by `mask` from `src` starting at `*pos`.
    pub fn unpack(&mut self, mask: &TgpMask, src: &[f64], pos: &mut usize) {
        let mut take = || {
            let v = src[*pos];
            *pos += 1;
            v
        };
        if mask.input_kernel {
            self.input_kernel.log_amplitude = take();
            for l in &mut self.input_kernel.log_lengthscales {
                *l = take();
            }
        }
        if mask.noise {
            self.log_noise = take();
        }
        for f in self.features.modes.iter_mut().filter(|f| f.coords.nrows() > 1) {
            if mask.coords {
                for v in f.coords.iter_mut() {
                    *v = take();
                }
            }
            if mask.output_kernel {
                for l in &mut f.kernel.log_lengthscales {
                    *l = take();
                }
            }
        }
    }
}

/// Which parameter groups are trainable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TgpMask {
    pub input_kernel: bool,
    pub noise: bool,
    /// Latent coordinates of the output modes.
    pub coords: bool,
    /// Lengthscales of the output-mode kernels.
    pub output_kernel: bool,
}

impl TgpMask {
    pub const ALL: TgpMask = TgpMask { input_kernel: true, noise: true, coords: true, output_kernel: true };
    pub const NONE: TgpMask = TgpMask { input_kernel: false, noise: false, coords: false, output_kernel: false };

    pub fn trains_output(&self) -> bool {
        self.coords || self.output_kernel
    }
}

/// Gradients with the same layout as [`TgpParams`].
#[derive(Clone, Debug)]
pub struct TgpGrads {
    pub input_log_amplitude: f64,
    pub input_log_lengthscales: Vec<f64>,
    pub log_noise: f64,
    pub coords: Vec<DMatrix<f64>>,
    pub output_log_lengthscales: Vec<Vec<f64>>,
}

impl TgpGrads {
    pub fn zeros(params: &TgpParams) -> Self {
        Self {
            input_log_amplitude: 0.0,
            input_log_lengthscales: vec![0.0; params.input_kernel.dim()],
            log_noise: 0.0,
            coords: params.features.modes.iter().map(|f| DMatrix::zeros(f.coords.nrows(), f.coords.ncols())).collect(),
            output_log_lengthscales: params.features.modes.iter().map(|f| vec![0.0; f.kernel.dim()]).collect(),
        }
    }

    pub fn pack(&self, params: &TgpParams, mask: &TgpMask, out: &mut Vec<f64>) {
        if mask.input_kernel {
            out.push(self.input_log_amplitude);
            out.extend_from_slice(&self.input_log_lengthscales);
        }
        if mask.noise {
            out.push(self.log_noise);
        }
        for (m, f) in params.features.modes.iter().enumerate() {
            if f.coords.nrows() > 1 {
                if mask.coords {
                    out.extend(self.coords[m].iter());
                }
                if mask.output_kernel {
                    out.extend_from_slice(&self.output_log_lengthscales[m]);
                }
            }
        }
    }

    /// Adds the chain rule through `K = gram(input_kernel, x, x)` for upstream `dL/dK`.
    pub(crate) fn add_input_gram(&mut self, kernel: &ArdKernelParams, x1: &DMatrix<f64>, x2: &DMatrix<f64>, gram: &DMatrix<f64>, upstream: &DMatrix<f64>) {
        let g = ard_gram_grads(kernel, x1, x2, gram, upstream);
        self.input_log_amplitude += g.log_amplitude;
        for (a, b) in self.input_log_lengthscales.iter_mut().zip(&g.log_lengthscales) {
            *a += b;
        }
    }

    /// Adds the chain rule through `S_m` for upstream `dL/dS_m`.
    pub(crate) fn add_output_cov(&mut self, params: &TgpParams, mode: usize, s: &DMatrix<f64>, upstream: &DMatrix<f64>) {
        let f = &params.features.modes[mode];
        let g = ard_gram_grads(&f.kernel, &f.coords, &f.coords, s, upstream);
        for (a, b) in self.output_log_lengthscales[mode].iter_mut().zip(&g.log_lengthscales) {
            *a += b;
        }
        self.coords[mode] += ard_gram_coord_grad(&f.kernel, &f.coords, s, upstream);
    }
}

/// Eigen-structured factorization of a TGP's training covariance.
#[derive(Clone, Debug)]
pub struct TgpFactor {
    pub k: DMatrix<f64>,
    pub s: Vec<DMatrix<f64>>,
    pub sys: KronSystem,
}

impl TgpFactor {
    pub fn new(params: &TgpParams, x: &DMatrix<f64>) -> Result<Self> {
        let k = ard_gram(&params.input_kernel, x, x)?;
        let s = params.output_covs()?;
        let mut eigs = vec![sym_eig(&k)?];
        for sm in &s {
            eigs.push(output_eig(sm)?);
        }
        let sys = KronSystem::new(EigenFactors::new(eigs), params.noise())?;
        Ok(Self { k, s, sys })
    }

    pub fn factor_refs(&self) -> Vec<&DMatrix<f64>> {
        std::iter::once(&self.k).chain(self.s.iter()).collect()
    }

    pub fn input_eig(&self) -> &SymEigen {
        &self.sys.eigs.factors[0]
    }

    pub fn output_eigs(&self) -> &[SymEigen] {
        &self.sys.eigs.factors[1..]
    }

    /// Joint eigenvalues of `S_1 ⊗ .. ⊗ S_M` as a tensor over the output modes.
    pub fn output_joint_values(&self) -> DenseTensor {
        EigenFactors::new(self.output_eigs().to_vec()).joint_values()
    }
}

/// Negative log marginal likelihood of `y` (already centered) and its gradients.
pub fn tgp_objective(params: &TgpParams, x: &DMatrix<f64>, y: &DenseTensor, want_grads: bool) -> Result<(f64, Option<TgpGrads>)> {
    check_data(params, x, y)?;
    let fac = TgpFactor::new(params, x)?;
    let (quad, alpha) = fac.sys.quad_and_solve(y)?;
    let nll = 0.5 * (quad + fac.sys.logdet() + y.len() as f64 * LN_2PI);
    if !nll.is_finite() {
        return Err(Error::Conditioning("non-finite likelihood".into()));
    }
    if !want_grads {
        return Ok((nll, None));
    }
    let mut grads = TgpGrads::zeros(params);
    let refs = fac.factor_refs();
    let gk = fac.sys.factor_grad(0, &alpha, &refs)?;
    grads.add_input_gram(&params.input_kernel, x, x, &fac.k, &gk);
    for m in 0..fac.s.len() {
        if fac.s[m].nrows() > 1 {
            let gs = fac.sys.factor_grad(m + 1, &alpha, &refs)?;
            grads.add_output_cov(params, m, &fac.s[m], &gs);
        }
    }
    grads.log_noise = fac.sys.noise_grad(&alpha) * params.log_noise.exp();
    Ok((nll, Some(grads)))
}

fn check_data(params: &TgpParams, x: &DMatrix<f64>, y: &DenseTensor) -> Result<()> {
    if y.ndim() < 1 || y.shape()[0] != x.nrows() {
        return shape_err(format!("{} inputs but outputs of shape {:?}", x.nrows(), y.shape()));
    }
    if y.shape()[1..] != params.output_shape()[..] {
        return shape_err(format!(
            "output modes {:?} do not match latent features {:?}",
            &y.shape()[1..],
            params.output_shape()
        ));
    }
    if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training data".into()));
    }
    Ok(())
}

/// Predictive mean and per-entry variance over the output modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorField {
    pub mean: DenseTensor,
    pub variance_diag: DenseTensor,
}

/// Covariance `(⊗B_m) diag(c) (⊗B_m)ᵀ` with `c` a tensor over the output modes.
#[derive(Clone, Debug)]
pub struct KronDiagTerm {
    pub coeffs: DenseTensor,
    pub bases: Vec<DMatrix<f64>>,
}

impl KronDiagTerm {
    pub fn diag(&self) -> Result<DenseTensor> {
        let mut out = self.coeffs.clone();
        for (m, b) in self.bases.iter().enumerate() {
            out = out.mode_product(m, &b.map(|v| v * v))?;
        }
        Ok(out)
    }

    /// Covariance of `W ∘ f` given this covariance for `f`.
    pub fn transform(&self, w: &TuckerWeights) -> Result<Self> {
        if w.len() != self.bases.len() {
            return shape_err("transform: factor count differs");
        }
        let bases = self.bases.iter().zip(&w.factors).map(|(b, wm)| wm * b).collect();
        Ok(Self { coeffs: self.coeffs.clone(), bases })
    }

    /// Dense covariance (testing and small problems only).
    pub fn dense(&self) -> DMatrix<f64> {
        let b = TuckerWeights::new(self.bases.clone()).kron();
        &b * DMatrix::from_diagonal(&self.coeffs.vec()) * b.transpose()
    }
}

/// A fitted factorization plus `α = Σ⁻¹ y`, ready for prediction.
#[derive(Clone, Debug)]
pub struct TgpPosterior {
    pub params: TgpParams,
    pub x: DMatrix<f64>,
    pub fac: TgpFactor,
    pub alpha: DenseTensor,
}

impl TgpPosterior {
    pub fn new(params: &TgpParams, x: &DMatrix<f64>, y: &DenseTensor) -> Result<Self> {
        check_data(params, x, y)?;
        let fac = TgpFactor::new(params, x)?;
        let alpha = fac.sys.solve(y)?;
        Ok(Self { params: params.clone(), x: x.clone(), fac, alpha })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.params.output_shape()
    }

    pub fn cross(&self, x_star: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ard_gram(&self.params.input_kernel, x_star, &self.x)
    }

    /// Latent posterior means for each row of `x_star`, stacked along mode 0.
    pub fn mean(&self, x_star: &DMatrix<f64>) -> Result<DenseTensor> {
        let mut out = self.alpha.mode_product(0, &self.cross(x_star)?)?;
        for (m, s) in self.fac.s.iter().enumerate() {
            out = out.mode_product(m + 1, s)?;
        }
        Ok(out)
    }

    /// Latent posterior covariance over the output modes at one input.
    pub fn latent_cov(&self, x_star_row: &DMatrix<f64>) -> Result<KronDiagTerm> {
        let kss = self.params.input_kernel.diag_value();
        let ks = self.cross(x_star_row)?;
        let ie = self.fac.input_eig();
        let a = ks * &ie.vectors;
        let lam_k = ie.clamped_values();
        let lam_s = self.fac.output_joint_values();
        let noise = self.fac.sys.noise;
        let coeffs = lam_s.map(|ls| {
            let mut corr = 0.0;
            for (ai, li) in a.iter().zip(&lam_k) {
                corr += ai * ai * ls * ls / (li * ls + noise);
            }
            (kss * ls - corr).max(0.0)
        });
        let bases = self.fac.output_eigs().iter().map(|e| e.vectors.clone()).collect();
        Ok(KronDiagTerm { coeffs, bases })
    }

    /// Indicator of exact equality between rows of `xh` and training inputs.
    pub fn coincidence(&self, xh: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(xh.nrows(), self.x.nrows(), |a, b| {
            if xh.row(a) == self.x.row(b) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Posterior mean of the noisy process `f + ε` at the rows of `xh`.
    pub fn noisy_mean(&self, xh: &DMatrix<f64>) -> Result<DenseTensor> {
        let latent = self.mean(xh)?;
        let delta = self.coincidence(xh);
        if delta.iter().all(|&v| v == 0.0) {
            return Ok(latent);
        }
        let hit = self.alpha.mode_product(0, &delta)?.scale(self.fac.sys.noise);
        latent.add(&hit)
    }

    /// `Uᵀ K(X, X̂)` and `Uᵀ Δᵀ` in the input eigenbasis.
    fn rotated_cross(&self, xh: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let u = &self.fac.input_eig().vectors;
        let kxh = ard_gram(&self.params.input_kernel, &self.x, xh)?;
        Ok((u.transpose() * kxh, u.transpose() * self.coincidence(xh).transpose()))
    }

    /// Exact posterior covariance of the noisy process `f + ε` at the rows of
    /// `xh`, one block per joint output eigen-index `j`: the covariance is
    /// `(I ⊗ U_S) blockdiag_j(C_j) (I ⊗ U_S)ᵀ` with samples as the slow index.
    pub fn noisy_cov_blocks(&self, xh: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let khh = ard_gram(&self.params.input_kernel, xh, xh)?;
        let (b1, b2) = self.rotated_cross(xh)?;
        let lam_k = self.fac.input_eig().clamped_values();
        let lam_s = self.fac.output_joint_values();
        let noise = self.fac.sys.noise;
        let n = xh.nrows();
        let mut out = Vec::with_capacity(lam_s.len());
        for &ls in lam_s.data() {
            let b = &b1 * ls + &b2 * noise;
            let scaled = DMatrix::from_fn(b.nrows(), n, |i, c| b[(i, c)] / (lam_k[i] * ls + noise));
            let c = &khh * ls + DMatrix::identity(n, n) * noise - b.transpose() * scaled;
            out.push((&c + c.transpose()) * 0.5);
        }
        Ok(out)
    }

    /// Posterior cross-covariance between the latent field at one input and
    /// the noisy process at `xh`, per joint output eigen-index (length `n̂` each).
    pub fn cross_blocks(&self, x_star_row: &DMatrix<f64>, xh: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
        let ksh = ard_gram(&self.params.input_kernel, x_star_row, xh)?;
        let a = self.fac.input_eig().vectors.transpose() * self.cross(x_star_row)?.transpose();
        let (b1, b2) = self.rotated_cross(xh)?;
        let lam_k = self.fac.input_eig().clamped_values();
        let lam_s = self.fac.output_joint_values();
        let noise = self.fac.sys.noise;
        let mut out = Vec::with_capacity(lam_s.len());
        for &ls in lam_s.data() {
            let w = DVector::from_fn(lam_k.len(), |i, _| a[i] * ls / (lam_k[i] * ls + noise));
            let b = &b1 * ls + &b2 * noise;
            out.push(ksh.row(0).transpose() * ls - b.transpose() * w);
        }
        Ok(out)
    }
}

/// Fitting options for a single tensor GP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TgpConfig {
    pub optim: OptimConfig,
    /// Laplace prior scale on latent coordinates; 0 disables it.
    pub laplace: f64,
    /// Subtract the per-entry training mean before fitting.
    pub center: bool,
    pub mask: TgpMask,
}

impl Default for TgpConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            laplace: 0.0,
            center: true,
            mask: TgpMask::ALL,
        }
    }
}

/// A fitted tensor GP: hyperparameters, training data and centering offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TgpModel {
    pub params: TgpParams,
    pub x: DMatrix<f64>,
    pub y: DenseTensor,
    /// Per-entry offset over the output modes, subtracted before fitting.
    pub offset: DenseTensor,
    pub trace: Vec<TraceEntry>,
}

/// Per-entry mean over mode 0.
pub fn sample_mean(y: &DenseTensor) -> DenseTensor {
    let n = y.shape()[0].max(1);
    let w = y.sample_len();
    let mut acc = vec![0.0; w];
    for i in 0..y.shape()[0] {
        for (a, v) in acc.iter_mut().zip(&y.data()[i * w..(i + 1) * w]) {
            *a += v;
        }
    }
    DenseTensor::new(y.shape()[1..].to_vec(), acc.into_iter().map(|a| a / n as f64).collect())
        .expect("shape consistent by construction")
}

/// Subtracts `offset` from every mode-0 slice.
pub fn subtract_offset(y: &DenseTensor, offset: &DenseTensor) -> Result<DenseTensor> {
    if y.shape()[1..] != *offset.shape() {
        return shape_err("offset shape does not match samples");
    }
    let w = offset.len();
    let mut out = y.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v -= offset.data()[i % w];
    }
    Ok(out)
}

/// Data-driven starting hyperparameters.
pub fn default_params(x: &DMatrix<f64>, y_centered: &DenseTensor, seed: u64) -> TgpParams {
    let var = (y_centered.norm_sq() / y_centered.len().max(1) as f64).max(1e-8);
    let ls: Vec<f64> = (0..x.ncols())
        .map(|c| {
            let col = x.column(c);
            let range = col.max() - col.min();
            if range > 0.0 {
                range
            } else {
                1.0
            }
        })
        .collect();
    TgpParams {
        input_kernel: ArdKernelParams::new(var, &ls).expect("positive by construction"),
        features: LatentFeatures::init(&y_centered.shape()[1..], seed),
        log_noise: (1e-2 * var).ln(),
    }
}

/// Flat objective over the masked parameters, with optional Laplace penalty.
pub fn tgp_flat_objective(
    base: &TgpParams,
    mask: &TgpMask,
    laplace: f64,
    x: &DMatrix<f64>,
    y: &DenseTensor,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut p = base.clone();
    let mut pos = 0;
    p.unpack(mask, theta, &mut pos);
    let (mut nll, grads) = tgp_objective(&p, x, y, true)?;
    let grads = grads.expect("requested");
    let mut g = Vec::with_capacity(theta.len());
    grads.pack(&p, mask, &mut g);
    if laplace > 0.0 && mask.coords {
        nll += laplace_penalty(&p, mask, laplace, &mut g, 0);
    }
    Ok((nll, g))
}

/// Adds `λ Σ|v|` over trainable coordinates to `g` (packed at `start`) and returns the penalty.
pub(crate) fn laplace_penalty(p: &TgpParams, mask: &TgpMask, laplace: f64, g: &mut [f64], start: usize) -> f64 {
    let mut off = start + usize::from(mask.input_kernel) * (1 + p.input_kernel.dim()) + usize::from(mask.noise);
    let mut total = 0.0;
    for f in p.features.modes.iter().filter(|f| f.coords.nrows() > 1) {
        for v in f.coords.iter() {
            total += laplace * v.abs();
            g[off] += laplace * v.signum();
            off += 1;
        }
        if mask.output_kernel {
            off += f.kernel.dim();
        }
    }
    total
}

/// Fits a tensor GP by maximum marginal likelihood from `init`.
pub fn tgp_fit_from(x: &DMatrix<f64>, y: &DenseTensor, init: TgpParams, config: &TgpConfig) -> Result<TgpModel> {
    let offset = if config.center {
        sample_mean(y)
    } else {
        DenseTensor::zeros(&y.shape()[1..])
    };
    let yc = subtract_offset(y, &offset)?;
    check_data(&init, x, &yc)?;
    let mut theta0 = Vec::new();
    init.pack(&config.mask, &mut theta0);
    let result = minimize(
        |t| tgp_flat_objective(&init, &config.mask, config.laplace, x, &yc, t),
        &theta0,
        &config.optim,
    )?;
    let mut params = init;
    let mut pos = 0;
    params.unpack(&config.mask, &result.params, &mut pos);
    Ok(TgpModel { params, x: x.clone(), y: y.clone(), offset, trace: result.trace })
}

/// Fits a tensor GP from data-driven defaults.
pub fn tgp_fit(x: &DMatrix<f64>, y: &DenseTensor, config: &TgpConfig) -> Result<TgpModel> {
    let offset = if config.center { sample_mean(y) } else { DenseTensor::zeros(&y.shape()[1..]) };
    let init = default_params(x, &subtract_offset(y, &offset)?, config.optim.seed);
    tgp_fit_from(x, y, init, config)
}

impl TgpModel {
    pub fn centered_outputs(&self) -> Result<DenseTensor> {
        subtract_offset(&self.y, &self.offset)
    }

    pub fn posterior(&self) -> Result<TgpPosterior> {
        TgpPosterior::new(&self.params, &self.x, &self.centered_outputs()?)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.params.output_shape()
    }
}

/// Negative log marginal likelihood of the model's centered training data.
pub fn tgp_nll(model: &TgpModel) -> Result<f64> {
    Ok(tgp_objective(&model.params, &model.x, &model.centered_outputs()?, false)?.0)
}

/// Predictions at each row of `x_star`, observation noise included in the variance.
pub fn tgp_predict_many(model: &TgpModel, x_star: &DMatrix<f64>) -> Result<Vec<PosteriorField>> {
    let post = model.posterior()?;
    let means = post.mean(x_star)?;
    let noise = post.fac.sys.noise;
    (0..x_star.nrows())
        .map(|i| {
            let row = x_star.rows(i, 1).into_owned();
            let var = post.latent_cov(&row)?.diag()?.map(|v| v.max(0.0) + noise);
            Ok(PosteriorField { mean: add_offset_field(&means.slice0(i), &model.offset)?, variance_diag: var })
        })
        .collect()
}

fn add_offset_field(field: &DenseTensor, offset: &DenseTensor) -> Result<DenseTensor> {
    field.add(offset)
}

pub fn tgp_predict(model: &TgpModel, x_star: &[f64]) -> Result<PosteriorField> {
    if x_star.len() != model.x.ncols() {
        return shape_err(format!("query has {} inputs, model expects {}", x_star.len(), model.x.ncols()));
    }
    let row = DMatrix::from_row_slice(1, x_star.len(), x_star);
    Ok(tgp_predict_many(model, &row)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::grad_audit;
    use crate::oracle::{dense_tgp_conditional, dense_tgp_cov, dense_tgp_nll, random_inputs, random_params, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_cov(params: &TgpParams, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> DMatrix<f64> {
        dense_tgp_cov(params, x1, x2).unwrap()
    }

    fn dense_nll(params: &TgpParams, x: &DMatrix<f64>, y: &DenseTensor) -> f64 {
        dense_tgp_nll(params, x, y).unwrap()
    }

    fn dense_conditional(params: &TgpParams, x: &DMatrix<f64>, y: &DenseTensor, xs: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        dense_tgp_conditional(params, x, y, xs).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    #[test]
    fn closed_form_scalar_case() {
        let params = TgpParams {
            input_kernel: ArdKernelParams::isotropic(1, 1.0, 1.0),
            features: LatentFeatures::init(&[1], 0),
            log_noise: (1.0 - JITTER).ln(),
        };
        let x = DMatrix::zeros(1, 1);
        let y = DenseTensor::zeros(&[1, 1]);
        let (nll, _) = tgp_objective(&params, &x, &y, false).unwrap();
        let expect = 0.5 * LN_2PI + 0.5 * 2f64.ln();
        assert!((nll - expect).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_dense_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..5 {
            let params = random_params(&mut rng, 2, &[2, 2]);
            let x = random_inputs(&mut rng, 3, 2);
            let y = random_tensor(&mut rng, &[3, 2, 2]);
            let (nll, _) = tgp_objective(&params, &x, &y, false).unwrap();
            assert!(rel(nll, dense_nll(&params, &x, &y)) < 1e-8);
        }
    }

    #[test]
    fn large_noise_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut params = random_params(&mut rng, 1, &[2]);
        params.log_noise = 40.0;
        let x = random_inputs(&mut rng, 3, 1);
        let y = random_tensor(&mut rng, &[3, 2]);
        let fac = TgpFactor::new(&params, &x).unwrap();
        let (quad, _) = fac.sys.quad_and_solve(&y).unwrap();
        assert!(quad < 1e-15);
        assert!(rel(fac.sys.logdet(), 6.0 * params.noise().ln()) < 1e-12);
    }

    #[test]
    fn gradients_pass_audit() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..3 {
            let params = random_params(&mut rng, 2, &[3, 2]);
            let x = random_inputs(&mut rng, 4, 2);
            let y = random_tensor(&mut rng, &[4, 3, 2]);
            let mut theta = Vec::new();
            params.pack(&TgpMask::ALL, &mut theta);
            let err = grad_audit(|t| tgp_flat_objective(&params, &TgpMask::ALL, 0.0, &x, &y, t), &theta, 1e-5).unwrap();
            assert!(err < 1e-4, "audit error {err}");
            let err = grad_audit(|t| tgp_flat_objective(&params, &TgpMask::ALL, 0.3, &x, &y, t), &theta, 1e-6).unwrap();
            assert!(err < 1e-4, "audit error with prior {err}");
        }
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let params = random_params(&mut rng, 2, &[3, 1, 2]);
        let mut theta = Vec::new();
        params.pack(&TgpMask::ALL, &mut theta);
        assert_eq!(theta.len(), 3 + 1 + (6 + 2) + (4 + 2));
        let mut only = Vec::new();
        params.pack(&TgpMask { coords: false, ..TgpMask::ALL }, &mut only);
        assert_eq!(only.len(), 3 + 1 + 2 + 2);
        let mut other = random_params(&mut rng, 2, &[3, 1, 2]);
        other.features.modes[1] = params.features.modes[1].clone();
        let mut pos = 0;
        other.unpack(&TgpMask::ALL, &theta, &mut pos);
        assert_eq!(pos, theta.len());
        assert_eq!(other, params);
    }

    #[test]
    fn prediction_matches_dense_conditional() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..5 {
            let params = random_params(&mut rng, 2, &[2, 3]);
            let x = random_inputs(&mut rng, 4, 2);
            let y = random_tensor(&mut rng, &[4, 2, 3]);
            let xs = random_inputs(&mut rng, 1, 2);
            let post = TgpPosterior::new(&params, &x, &y).unwrap();
            let mean = post.mean(&xs).unwrap();
            let var = post.latent_cov(&xs).unwrap().diag().unwrap();
            let (dm, dc) = dense_conditional(&params, &x, &y, &xs);
            let scale = dm.amax();
            for i in 0..6 {
                assert!((mean.data()[i] - dm[i]).abs() <= 1e-7 * scale);
                assert!(rel(var.data()[i], dc[(i, i)]) < 1e-6);
            }
            let dense_cov = post.latent_cov(&xs).unwrap().dense();
            assert!((dense_cov - &dc).amax() < 1e-9);
        }
    }

    #[test]
    fn noisy_process_posterior_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let params = random_params(&mut rng, 1, &[2, 2]);
        let x = random_inputs(&mut rng, 4, 1);
        let y = random_tensor(&mut rng, &[4, 2, 2]);
        // second imaginary input coincides with a training input
        let xh = DMatrix::from_row_slice(3, 1, &[0.37, x[(1, 0)], 0.81]);
        let xs = DMatrix::from_row_slice(1, 1, &[0.52]);
        let post = TgpPosterior::new(&params, &x, &y).unwrap();
        let noise = params.noise();
        let delta = post.coincidence(&xh);
        assert_eq!(delta.sum(), 1.0);

        let sigma = dense_cov(&params, &x, &x) + DMatrix::identity(16, 16) * noise;
        let cross_hy = dense_cov(&params, &xh, &x) + crate::tensalg::kron(&delta, &DMatrix::identity(4, 4)) * noise;
        let prior_hh = dense_cov(&params, &xh, &xh) + DMatrix::identity(12, 12) * noise;
        let chol = sigma.cholesky().unwrap();
        let dense_mean = &cross_hy * chol.solve(&y.vec());
        let dense_cov_hh = &prior_hh - &cross_hy * chol.solve(&cross_hy.transpose());
        let cross_sy = dense_cov(&params, &xs, &x);
        let dense_cross = dense_cov(&params, &xs, &xh) - &cross_sy * chol.solve(&cross_hy.transpose());

        let mean = post.noisy_mean(&xh).unwrap();
        assert!((mean.vec() - dense_mean).amax() < 1e-9);

        let u = TuckerWeights::new(post.fac.output_eigs().iter().map(|e| e.vectors.clone()).collect()).kron();
        assert!((&u * u.transpose() - DMatrix::identity(4, 4)).amax() < 1e-10);
        let big_u = crate::tensalg::kron(&DMatrix::identity(3, 3), &u);
        let blocks = post.noisy_cov_blocks(&xh).unwrap();
        let mut mid = DMatrix::zeros(12, 12);
        for (j, c) in blocks.iter().enumerate() {
            for a in 0..3 {
                for b in 0..3 {
                    mid[(a * 4 + j, b * 4 + j)] = c[(a, b)];
                }
            }
        }
        assert!((&big_u * mid * big_u.transpose() - dense_cov_hh).amax() < 1e-10);

        let cb = post.cross_blocks(&xs, &xh).unwrap();
        let mut cmid = DMatrix::zeros(4, 12);
        for (j, c) in cb.iter().enumerate() {
            for a in 0..3 {
                cmid[(j, a * 4 + j)] = c[a];
            }
        }
        assert!((&u * cmid * big_u.transpose() - dense_cross).amax() < 1e-10);
    }

    #[test]
    fn interpolates_training_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut params = random_params(&mut rng, 1, &[2, 2]);
        params.log_noise = -40.0;
        // well-separated latent rows keep S well conditioned
        for f in &mut params.features.modes {
            f.coords = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        }
        params.input_kernel.log_lengthscales[0] = 0.1f64.ln();
        let x = random_inputs(&mut rng, 5, 1);
        let y = random_tensor(&mut rng, &[5, 2, 2]);
        let model = TgpModel { params, x: x.clone(), y: y.clone(), offset: DenseTensor::zeros(&[2, 2]), trace: vec![] };
        let p = tgp_predict(&model, &[x[(2, 0)]]).unwrap();
        for (a, b) in p.mean.data().iter().zip(y.slice0(2).data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn far_field_reverts_to_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let params = random_params(&mut rng, 1, &[3]);
        let x = random_inputs(&mut rng, 4, 1);
        let y = random_tensor(&mut rng, &[4, 3]);
        let model = TgpModel { params: params.clone(), x, y, offset: DenseTensor::zeros(&[3]), trace: vec![] };
        let p = tgp_predict(&model, &[1e3]).unwrap();
        let s = output_cov(&params.features, 0).unwrap();
        for i in 0..3 {
            assert!(p.mean.data()[i].abs() < 1e-12);
            let prior = params.input_kernel.amplitude() * s[(i, i)] + params.noise();
            assert!(rel(p.variance_diag.data()[i], prior) < 1e-12);
        }
    }

    #[test]
    fn constant_outputs_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let x = random_inputs(&mut rng, 6, 2);
        let y = DenseTensor::filled(&[6, 2, 3], 4.2);
        let model = tgp_fit(&x, &y, &TgpConfig::default()).unwrap();
        let p = tgp_predict(&model, &[0.3, 0.9]).unwrap();
        assert!(p.mean.data().iter().all(|v| (v - 4.2).abs() < 1e-3));
    }

    #[test]
    fn recovers_lengthscale_of_a_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let x = DMatrix::from_fn(30, 1, |i, _| i as f64 / 29.0);
        let truth = ArdKernelParams::new(1.0, &[0.3]).unwrap();
        let k = ard_gram(&truth, &x, &x).unwrap() + DMatrix::identity(30, 30) * 1e-4;
        let l = k.cholesky().unwrap().l();
        let z = DVector::from_fn(30, |_, _| {
            let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            v
        });
        let y = DenseTensor::new(vec![30, 1], (l * z).as_slice().to_vec()).unwrap();
        let cfg = TgpConfig {
            optim: OptimConfig { max_iters: 600, step: 0.05, ..Default::default() },
            ..Default::default()
        };
        let model = tgp_fit(&x, &y, &cfg).unwrap();
        let ls = model.params.input_kernel.lengthscales()[0];
        assert!(ls > 0.15 && ls < 0.6, "lengthscale {ls}");
        assert!(model.trace.windows(2).all(|w| w[1].objective <= w[0].objective));
        assert!(model.trace.last().unwrap().objective <= model.trace[0].objective);
    }

    #[test]
    fn variance_drops_when_point_is_added() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = random_params(&mut rng, 1, &[2, 2]);
        let x = random_inputs(&mut rng, 4, 1);
        let y = random_tensor(&mut rng, &[4, 2, 2]);
        let xs = DMatrix::from_row_slice(1, 1, &[0.5]);
        let before = TgpPosterior::new(&params, &x, &y).unwrap().latent_cov(&xs).unwrap().diag().unwrap();
        let x2 = DMatrix::from_fn(5, 1, |i, _| if i < 4 { x[(i, 0)] } else { 0.5 });
        let y2 = DenseTensor::concat0(&y, &DenseTensor::zeros(&[1, 2, 2])).unwrap();
        let after = TgpPosterior::new(&params, &x2, &y2).unwrap().latent_cov(&xs).unwrap().diag().unwrap();
        for (a, b) in after.data().iter().zip(before.data()) {
            assert!(a < b);
        }
    }

    #[test]
    fn counter_tracks_output_factorizations() {
        reset_output_factorization_count();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = random_params(&mut rng, 1, &[2, 3]);
        let x = random_inputs(&mut rng, 3, 1);
        TgpFactor::new(&params, &x).unwrap();
        assert_eq!(output_factorization_count(), 2);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]
        #[test]
        fn dense_oracle_equivalence(seed in 0u64..10_000, n in 1usize..6, d1 in 1usize..4, d2 in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_params(&mut rng, 2, &[d1, d2]);
            let x = random_inputs(&mut rng, n, 2);
            let y = random_tensor(&mut rng, &[n, d1, d2]);
            let (nll, _) = tgp_objective(&params, &x, &y, false).unwrap();
            proptest::prop_assert!(rel(nll, dense_nll(&params, &x, &y)) <= 1e-7);
            let xs = random_inputs(&mut rng, 1, 2);
            let post = TgpPosterior::new(&params, &x, &y).unwrap();
            let mean = post.mean(&xs).unwrap();
            let var = post.latent_cov(&xs).unwrap().diag().unwrap();
            let (dm, dc) = dense_conditional(&params, &x, &y, &xs);
            for i in 0..d1 * d2 {
                proptest::prop_assert!((mean.data()[i] - dm[i]).abs() <= 1e-7 * dm.amax().max(1e-3));
                proptest::prop_assert!((var.data()[i] - dc[(i, i)]).abs() <= 1e-7 * dc[(i, i)].abs().max(1e-6));
                proptest::prop_assert!(var.data()[i] >= 0.0);
            }
        }
    }
}
