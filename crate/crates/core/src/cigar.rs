//! The identity-output-covariance variant of GAR with column-orthonormal
//! weights. Every solve is an `N × N` input-space solve; no output covariance
//! is ever built or factorized.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::gar::{build_subset_plan, default_weights, GarModel, MultiFidelityDataset, SubsetPlan};
use crate::hogp::{default_params, noise_from_log, sample_mean, subtract_offset, PosteriorField, TgpModel, TgpParams};
use crate::kernels::{ard_gram, ard_gram_grads, ArdKernelParams, LatentFeatures};
use crate::optim::{grad_audit, minimize, minimize_projected, OptimConfig, TraceEntry};
use crate::tensalg::{tucker_apply, tucker_factor_grads, DenseTensor, TuckerWeights};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Nearest matrix with orthonormal columns (polar factor `U Vᵀ` of the SVD).
pub fn orthonormalize_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() < m.ncols() {
        return Err(Error::RankDeficient(format!(
            "a {}x{} factor cannot have orthonormal columns",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("weight factor".into()));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax.max(1e-300)) {
        return Err(Error::RankDeficient(format!("singular values range {smin:e}..{smax:e}")));
    }
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    Ok(u * vt)
}

/// Projects every factor onto orthonormal columns.
pub fn orthonormalize(weights: &TuckerWeights) -> Result<TuckerWeights> {
    Ok(TuckerWeights::new(weights.factors.iter().map(orthonormalize_factor).collect::<Result<_>>()?))
}

/// `max_m ‖W_mᵀ W_m − I‖_∞`.
pub fn orthogonality_error(weights: &TuckerWeights) -> f64 {
    weights
        .factors
        .iter()
        .map(|w| (w.transpose() * w - DMatrix::identity(w.ncols(), w.ncols())).amax())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CigarConfig {
    pub low_optim: OptimConfig,
    pub residual_optim: OptimConfig,
    pub center: bool,
    pub match_tol: Option<f64>,
    /// Starting weights for every transition, orthonormalized before use
    /// (default: [`default_weights`]).
    pub weight_init: Option<TuckerWeights>,
}

impl Default for CigarConfig {
    fn default() -> Self {
        Self {
            low_optim: OptimConfig::default(),
            residual_optim: OptimConfig::default(),
            center: true,
            match_tol: None,
            weight_init: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CigarTransition {
    pub weights: TuckerWeights,
    /// Residual hyperparameters; latent features are fixed identities.
    pub residual: TgpParams,
    pub plan: SubsetPlan,
    pub trace: Vec<TraceEntry>,
    /// Largest `‖WᵀW − I‖_∞` over every point the optimizer evaluated.
    pub orthogonality_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CigarModel {
    pub data: MultiFidelityDataset,
    /// Lowest level with identity output covariances.
    pub low: TgpModel,
    pub transitions: Vec<CigarTransition>,
}

/// `K + σ²I` and its Cholesky factor.
struct InputFactor {
    k: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl InputFactor {
    fn new(kernel: &ArdKernelParams, noise: f64, x: &DMatrix<f64>) -> Result<Self> {
        let k = ard_gram(kernel, x, x)?;
        let c = &k + DMatrix::identity(x.nrows(), x.nrows()) * noise;
        Self::from_cov(k, c)
    }

    /// `k` is the part of `c` that is not observation noise.
    fn from_cov(k: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let chol = c.cholesky().ok_or_else(|| Error::Conditioning("input covariance not positive definite".into()))?;
        Ok(Self { k, chol })
    }

    fn logdet(&self) -> f64 {
        2.0 * self.chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Samples as rows, flattened outputs as columns.
fn as_matrix(t: &DenseTensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.sample_len(), t.data())
}

fn from_matrix(m: &DMatrix<f64>, shape: &[usize]) -> Result<DenseTensor> {
    DenseTensor::new(shape.to_vec(), m.transpose().as_slice().to_vec())
}

fn pack_kernel(p: &TgpParams, out: &mut Vec<f64>) {
    out.push(p.input_kernel.log_amplitude);
    out.extend_from_slice(&p.input_kernel.log_lengthscales);
    out.push(p.log_noise);
}

fn unpack_kernel(p: &mut TgpParams, src: &[f64], pos: &mut usize) {
    p.input_kernel.log_amplitude = src[*pos];
    *pos += 1;
    for l in &mut p.input_kernel.log_lengthscales {
        *l = src[*pos];
        *pos += 1;
    }
    p.log_noise = src[*pos];
    *pos += 1;
}

fn kernel_grads(p: &TgpParams, x: &DMatrix<f64>, k: &DMatrix<f64>, gc: &DMatrix<f64>, out: &mut Vec<f64>) {
    let g = ard_gram_grads(&p.input_kernel, x, x, k, gc);
    out.push(g.log_amplitude);
    out.extend_from_slice(&g.log_lengthscales);
    out.push(gc.trace() * p.log_noise.exp());
}

/// NLL of `Y ~ N(0, (K + σ²I) ⊗ I)` with samples as rows.
fn independent_nll(p: &TgpParams, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
    let f = InputFactor::new(&p.input_kernel, p.noise(), x)?;
    let a = f.chol.solve(y);
    let d = y.ncols() as f64;
    let nll = 0.5 * (y.dot(&a) + d * f.logdet() + y.len() as f64 * LN_2PI);
    let gc = (f.inverse() * d - &a * a.transpose()) * 0.5;
    let mut g = Vec::new();
    kernel_grads(p, x, &f.k, &gc, &mut g);
    Ok((nll, g))
}

pub(crate) fn identity_params(kernel_src: TgpParams, sizes: &[usize]) -> TgpParams {
    TgpParams { features: LatentFeatures::identity(sizes), ..kernel_src }
}

/// Data of one transition.
struct CigarProblem {
    x: DMatrix<f64>,
    y: DenseTensor,
    anchor: DenseTensor,
    /// `Ê Ŝ Êᵀ`: posterior covariance of the lower level at unmatched rows.
    imag_cov: Option<DMatrix<f64>>,
}

/// Posterior of the noisy lowest-level process at `xh` for each output entry:
/// mean (`n̂ × d`, offset included) and the shared input covariance.
fn low_noisy_posterior(low: &TgpModel, xh: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = &low.params;
    let noise = p.noise();
    let f = InputFactor::new(&p.input_kernel, noise, &low.x)?;
    let delta = DMatrix::from_fn(low.x.nrows(), xh.nrows(), |i, j| if low.x.row(i) == xh.row(j) { noise } else { 0.0 });
    let kxh = ard_gram(&p.input_kernel, &low.x, xh)? + delta;
    let khh = ard_gram(&p.input_kernel, xh, xh)? + DMatrix::identity(xh.nrows(), xh.nrows()) * noise;
    let solved = f.chol.solve(&kxh);
    let cov = khh - kxh.transpose() * &solved;
    let yc = as_matrix(&low.centered_outputs()?);
    let mut mean = solved.transpose() * yc;
    for mut r in mean.row_iter_mut() {
        for (v, o) in r.iter_mut().zip(low.offset.data()) {
            *v += o;
        }
    }
    Ok(((&cov + cov.transpose()) * 0.5, mean))
}

fn build_problem(data: &MultiFidelityDataset, low: &TgpModel, t: usize, plan: &SubsetPlan) -> Result<CigarProblem> {
    let hi = &data.levels[t + 1];
    let lo = &data.levels[t];
    let w = lo.y.sample_len();
    let mut shape = vec![hi.n()];
    shape.extend_from_slice(lo.output_shape());
    let mut anchor = DenseTensor::zeros(&shape);
    for &(h, l) in &plan.matched {
        anchor.data_mut()[h * w..(h + 1) * w].copy_from_slice(&lo.y.data()[l * w..(l + 1) * w]);
    }
    let imag_cov = if plan.is_subset() {
        None
    } else {
        if t != 0 {
            return Err(Error::Unsupported("unmatched inputs are only supported directly above the lowest level".into()));
        }
        let xh = DMatrix::from_fn(plan.unmatched.len(), hi.x.ncols(), |i, j| hi.x[(plan.unmatched[i], j)]);
        let (cov, mean) = low_noisy_posterior(low, &xh)?;
        let mut big = DMatrix::zeros(hi.n(), hi.n());
        for (a, &ra) in plan.unmatched.iter().enumerate() {
            anchor.data_mut()[ra * w..(ra + 1) * w].copy_from_slice(mean.row(a).transpose().as_slice());
            for (b, &rb) in plan.unmatched.iter().enumerate() {
                big[(ra, rb)] = cov[(a, b)];
            }
        }
        Some(big)
    };
    Ok(CigarProblem { x: hi.x.clone(), y: hi.y.clone(), anchor, imag_cov })
}

impl CigarProblem {
    /// NLL and gradient over `[W entries.., log amplitude, log lengthscales.., log noise]`.
    fn objective(&self, w0: &TuckerWeights, p0: &TgpParams, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut w = w0.clone();
        let mut pos = 0;
        for f in &mut w.factors {
            for v in f.iter_mut() {
                *v = theta[pos];
                pos += 1;
            }
        }
        let mut p = p0.clone();
        unpack_kernel(&mut p, theta, &mut pos);

        let e_t = self.y.sub(&tucker_apply(&self.anchor, &w, 1)?)?;
        let e = as_matrix(&e_t);
        let n = e.nrows();
        let dh = e.ncols();
        let fr = InputFactor::new(&p.input_kernel, p.noise(), &self.x)?;
        let cr_e = fr.chol.solve(&e);
        let mut quad = e.dot(&cr_e);
        let (gc, de, mut gw_extra, logdet) = match &self.imag_cov {
            None => {
                let gc = (fr.inverse() * dh as f64 - &cr_e * cr_e.transpose()) * 0.5;
                (gc, cr_e, None, dh as f64 * fr.logdet())
            }
            Some(shat) => {
                let wt = w.transpose();
                let ea_t = tucker_apply(&e_t, &wt, 1)?;
                let ea = as_matrix(&ea_t);
                let dl = ea.ncols();
                let fa = InputFactor::from_cov(shat.clone(), &fr.k + DMatrix::identity(n, n) * p.noise() + shat)?;
                let cr_ea = fr.chol.solve(&ea);
                let ca_ea = fa.chol.solve(&ea);
                quad += ea.dot(&ca_ea) - ea.dot(&cr_ea);
                let logdet = (dh - dl) as f64 * fr.logdet() + dl as f64 * fa.logdet();
                let gc = (fr.inverse() * (dh - dl) as f64 - &cr_e * cr_e.transpose() + &cr_ea * cr_ea.transpose()
                    + fa.inverse() * dl as f64
                    - &ca_ea * ca_ea.transpose())
                    * 0.5;
                let h = &ca_ea - &cr_ea;
                let h_t = from_matrix(&h, ea_t.shape())?;
                let de = &cr_e + as_matrix(&tucker_apply(&h_t, &w, 1)?);
                let gwt = tucker_factor_grads(&h_t, &e_t, &wt, 1)?;
                (gc, de, Some(gwt.into_iter().map(|g| g.transpose()).collect::<Vec<_>>()), logdet)
            }
        };
        let nll = 0.5 * (quad + logdet + e.len() as f64 * LN_2PI);
        if !nll.is_finite() {
            return Err(Error::Conditioning("non-finite likelihood".into()));
        }
        let de_t = from_matrix(&(-de), e_t.shape())?;
        let mut gw = tucker_factor_grads(&de_t, &self.anchor, &w, 1)?;
        if let Some(extra) = gw_extra.take() {
            for (a, b) in gw.iter_mut().zip(extra) {
                *a += b;
            }
        }
        let mut g = Vec::with_capacity(theta.len());
        for f in &gw {
            g.extend(f.iter());
        }
        kernel_grads(&p, &self.x, &fr.k, &gc, &mut g);
        Ok((nll, g))
    }
}

fn fit_low(data: &MultiFidelityDataset, config: &CigarConfig) -> Result<TgpModel> {
    let l0 = &data.levels[0];
    let offset = if config.center { sample_mean(&l0.y) } else { DenseTensor::zeros(l0.output_shape()) };
    let yc = subtract_offset(&l0.y, &offset)?;
    let init = identity_params(default_params(&l0.x, &yc, config.low_optim.seed), l0.output_shape());
    let ym = as_matrix(&yc);
    let mut theta0 = Vec::new();
    pack_kernel(&init, &mut theta0);
    let res = minimize(
        |th| {
            let mut p = init.clone();
            unpack_kernel(&mut p, th, &mut 0);
            independent_nll(&p, &l0.x, &ym)
        },
        &theta0,
        &config.low_optim,
    )?;
    let mut params = init;
    unpack_kernel(&mut params, &res.params, &mut 0);
    Ok(TgpModel { params, x: l0.x.clone(), y: l0.y.clone(), offset, trace: res.trace })
}

fn pack_transition(w: &TuckerWeights, p: &TgpParams) -> Vec<f64> {
    let mut theta = Vec::new();
    for f in &w.factors {
        theta.extend(f.iter());
    }
    pack_kernel(p, &mut theta);
    theta
}

/// Fits the lowest level, then every transition with orthonormal weights.
pub fn cigar_fit(dataset: &MultiFidelityDataset, config: &CigarConfig) -> Result<CigarModel> {
    let data = dataset.padded()?;
    if data.n_levels() < 2 {
        return shape_err("at least two fidelity levels are needed");
    }
    let low = fit_low(&data, config).map_err(|e| Error::Level { level: 0, source: Box::new(e) })?;
    let mut transitions = Vec::new();
    for t in 0..data.n_levels() - 1 {
        let tr = fit_transition(&data, &low, t, config).map_err(|e| Error::Level { level: t + 1, source: Box::new(e) })?;
        transitions.push(tr);
    }
    Ok(CigarModel { data, low, transitions })
}

fn fit_transition(data: &MultiFidelityDataset, low: &TgpModel, t: usize, config: &CigarConfig) -> Result<CigarTransition> {
    let plan = build_subset_plan(data, t, config.match_tol)?;
    let prob = build_problem(data, low, t, &plan)?;
    let hi_shape = data.levels[t + 1].output_shape().to_vec();
    let lo_shape = data.levels[t].output_shape();
    let w_init = match &config.weight_init {
        Some(w) if w.out_shape() != hi_shape || w.in_shape() != lo_shape => {
            return shape_err(format!("initial weights map {:?} to {:?}", w.in_shape(), w.out_shape()));
        }
        Some(w) => w.clone(),
        None => default_weights(&hi_shape, lo_shape),
    };
    let w0 = orthonormalize(&w_init)?;
    let e0 = prob.y.sub(&tucker_apply(&prob.anchor, &w0, 1)?)?;
    let p0 = identity_params(default_params(&prob.x, &e0, config.residual_optim.seed.wrapping_add(t as u64 + 1)), &hi_shape);
    let nw = w0.n_params();
    let mut worst = 0.0f64;
    let res = minimize_projected(
        |th| {
            let mut pos = 0;
            let mut w = w0.clone();
            for f in &mut w.factors {
                for v in f.iter_mut() {
                    *v = th[pos];
                    pos += 1;
                }
            }
            worst = worst.max(orthogonality_error(&w));
            prob.objective(&w0, &p0, th)
        },
        |th| {
            let mut pos = 0;
            for f in &w0.factors {
                let n = f.len();
                let q = orthonormalize_factor(&DMatrix::from_column_slice(f.nrows(), f.ncols(), &th[pos..pos + n]))?;
                th[pos..pos + n].copy_from_slice(q.as_slice());
                pos += n;
            }
            debug_assert_eq!(pos, nw);
            Ok(())
        },
        &pack_transition(&w0, &p0),
        &config.residual_optim,
    )?;
    let mut pos = 0;
    let mut w = w0.clone();
    for f in &mut w.factors {
        for v in f.iter_mut() {
            *v = res.params[pos];
            pos += 1;
        }
    }
    let mut residual = p0;
    unpack_kernel(&mut residual, &res.params, &mut pos);
    Ok(CigarTransition { weights: w, residual, plan, trace: res.trace, orthogonality_error: worst })
}

/// Total negative log likelihood of the training data.
pub fn cigar_nll(model: &CigarModel) -> Result<f64> {
    let low = &model.low;
    let mut total = independent_nll(&low.params, &low.x, &as_matrix(&low.centered_outputs()?))?.0;
    for (t, tr) in model.transitions.iter().enumerate() {
        let prob = build_problem(&model.data, low, t, &tr.plan)?;
        total += prob.objective(&tr.weights, &tr.residual, &pack_transition(&tr.weights, &tr.residual))?.0;
    }
    Ok(total)
}

/// Largest finite-difference gradient error over every stage objective.
pub fn cigar_grad_audit(model: &CigarModel, eps: f64) -> Result<f64> {
    let low = &model.low;
    let ym = as_matrix(&low.centered_outputs()?);
    let mut theta = Vec::new();
    pack_kernel(&low.params, &mut theta);
    let mut worst = grad_audit(
        |th| {
            let mut p = low.params.clone();
            unpack_kernel(&mut p, th, &mut 0);
            independent_nll(&p, &low.x, &ym)
        },
        &theta,
        eps,
    )?;
    for (t, tr) in model.transitions.iter().enumerate() {
        let prob = build_problem(&model.data, low, t, &tr.plan)?;
        let err = grad_audit(|th| prob.objective(&tr.weights, &tr.residual, th), &pack_transition(&tr.weights, &tr.residual), eps)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

impl CigarModel {
    /// The same parameters as a GAR model with identity output covariances.
    pub fn to_gar(&self) -> Result<GarModel> {
        GarModel::from_parts(
            &self.data,
            self.low.clone(),
            self.transitions.iter().map(|t| t.weights.clone()).collect(),
            self.transitions.iter().map(|t| t.residual.clone()).collect(),
        )
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.data.levels[self.transitions.len()].output_shape().to_vec()
    }
}

/// `diag(⊗W_m ⊗W_mᵀ)` as a tensor.
fn row_norms(w: &TuckerWeights) -> DenseTensor {
    let rows: Vec<Vec<f64>> = w.factors.iter().map(|f| f.row_iter().map(|r| r.norm_squared()).collect()).collect();
    DenseTensor::from_fn(&w.out_shape(), |idx| idx.iter().zip(&rows).map(|(&i, r)| r[i]).product())
}

/// A scalar-covariance GP term: posterior mean at the queries and variance.
struct ScalarGp {
    params: TgpParams,
    x: DMatrix<f64>,
    f: InputFactor,
    alpha: DMatrix<f64>,
}

impl ScalarGp {
    fn new(params: &TgpParams, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        let f = InputFactor::new(&params.input_kernel, params.noise(), x)?;
        let alpha = f.chol.solve(y);
        Ok(Self { params: params.clone(), x: x.clone(), f, alpha })
    }

    fn cross(&self, row: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(ard_gram(&self.params.input_kernel, &self.x, row)?.column(0).into_owned())
    }

    fn latent_var(&self, ks: &DVector<f64>) -> f64 {
        (self.params.input_kernel.diag_value() - ks.dot(&self.f.chol.solve(ks))).max(0.0)
    }
}

/// Predictions at the top level for each row of `x_star`.
pub fn cigar_predict_many(model: &CigarModel, x_star: &DMatrix<f64>) -> Result<Vec<PosteriorField>> {
    if x_star.ncols() != model.data.input_dim() {
        return shape_err("query dimension differs from training inputs");
    }
    let low = &model.low;
    let top = model.transitions.len() - 1;
    // independent components mapped to the level just below the top
    let mut comps: Vec<(ScalarGp, TuckerWeights)> =
        vec![(ScalarGp::new(&low.params, &low.x, &as_matrix(&low.centered_outputs()?))?, TuckerWeights::identity(&low.output_shape()))];
    let mut offset = low.offset.clone();
    for t in 0..top {
        let tr = &model.transitions[t];
        if !tr.plan.is_subset() {
            return Err(Error::Unsupported("unmatched inputs below the top level".into()));
        }
        for c in comps.iter_mut() {
            c.1 = tr.weights.compose(&c.1)?;
        }
        offset = tucker_apply(&offset, &tr.weights, 0)?;
        let prob = build_problem(&model.data, low, t, &tr.plan)?;
        let r = prob.y.sub(&tucker_apply(&prob.anchor, &tr.weights, 1)?)?;
        comps.push((ScalarGp::new(&tr.residual, &prob.x, &as_matrix(&r))?, TuckerWeights::identity(&tr.residual.output_shape())));
    }
    let tr = &model.transitions[top];
    let w = &tr.weights;
    let prob = build_problem(&model.data, low, top, &tr.plan)?;
    let e_t = prob.y.sub(&tucker_apply(&prob.anchor, w, 1)?)?;
    let resid = ScalarGp::new(&tr.residual, &prob.x, &as_matrix(&e_t))?;
    let hi_shape = model.output_shape();
    let lo_shape = offset.shape().to_vec();
    let rho = row_norms(w);
    let noise = noise_from_log(tr.residual.log_noise);
    let theta_r = tr.residual.input_kernel.diag_value();

    // range-space pieces for unmatched inputs (only the lowest level sits below)
    let imag = match &prob.imag_cov {
        Some(shat) => {
            let wt = w.transpose();
            let ea = as_matrix(&tucker_apply(&e_t, &wt, 1)?);
            let n = shat.nrows();
            let fa = InputFactor::from_cov(shat.clone(), &resid.f.k + DMatrix::identity(n, n) * noise + shat)?;
            let xh = DMatrix::from_fn(tr.plan.unmatched.len(), prob.x.ncols(), |i, j| prob.x[(tr.plan.unmatched[i], j)]);
            Some((fa, ea, xh))
        }
        None => None,
    };

    (0..x_star.nrows())
        .map(|i| {
            let row = x_star.rows(i, 1).into_owned();
            let mut lower_mean = offset.clone();
            let mut lower_var = DenseTensor::zeros(&hi_shape);
            let mut v_low = 0.0;
            for (gp, a) in &comps {
                let ks = gp.cross(&row)?;
                let m = DenseTensor::new(gp.params.output_shape(), (gp.alpha.transpose() * &ks).as_slice().to_vec())?;
                lower_mean = lower_mean.add(&tucker_apply(&m, a, 0)?)?;
                let v = gp.latent_var(&ks);
                v_low = v;
                lower_var = lower_var.add(&row_norms(&w.compose(a)?).scale(v))?;
            }
            let kr = resid.cross(&row)?;
            let smooth = DenseTensor::new(hi_shape.clone(), (resid.alpha.transpose() * &kr).as_slice().to_vec())?;
            let vr = resid.latent_var(&kr);
            match &imag {
                None => {
                    let mean = tucker_apply(&lower_mean, w, 0)?.add(&smooth)?;
                    let var = lower_var.map(|v| v + vr + noise);
                    Ok(PosteriorField { mean, variance_diag: var })
                }
                Some((fa, ea, xh)) => {
                    // one lowest-level component: cross term with the imaginary block
                    let (gp, _) = &comps[0];
                    let ks = gp.cross(&row)?;
                    let noise_l = gp.params.noise();
                    let delta = DMatrix::from_fn(gp.x.nrows(), xh.nrows(), |a, b| if gp.x.row(a) == xh.row(b) { noise_l } else { 0.0 });
                    let kxh = ard_gram(&gp.params.input_kernel, &gp.x, xh)? + delta;
                    let ksh = ard_gram(&gp.params.input_kernel, &row, xh)?.row(0).transpose();
                    let c = ksh - kxh.transpose() * gp.f.chol.solve(&ks);
                    let mut h = kr.clone();
                    for (p, &r) in tr.plan.unmatched.iter().enumerate() {
                        h[r] += c[p];
                    }
                    let ca_h = fa.chol.solve(&h);
                    let mean_a = lower_mean.add(&DenseTensor::new(lo_shape.clone(), (ea.transpose() * &ca_h).as_slice().to_vec())?)?;
                    let proj = tucker_apply(&tucker_apply(&smooth, &w.transpose(), 0)?, w, 0)?;
                    let mean = tucker_apply(&mean_a, w, 0)?.add(&smooth.sub(&proj)?)?;
                    let var_a = v_low + theta_r - h.dot(&ca_h);
                    let var = rho.map(|r| (r * var_a.max(0.0) + (1.0 - r) * vr).max(0.0) + noise);
                    Ok(PosteriorField { mean, variance_diag: var })
                }
            }
        })
        .collect()
}

pub fn cigar_predict(model: &CigarModel, x_star: &[f64]) -> Result<PosteriorField> {
    let row = DMatrix::from_row_slice(1, x_star.len(), x_star);
    Ok(cigar_predict_many(model, &row)?.remove(0))
}

#[cfg(test)]
mod tests;
