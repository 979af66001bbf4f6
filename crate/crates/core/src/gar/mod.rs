//! Generalized autoregression: each fidelity is a Tucker-mapped copy of the
//! one below plus an independent residual tensor GP.

mod dataset;
mod lower;
mod residual;
mod weights;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use dataset::{build_subset_plan, FidelityLevel, MultiFidelityDataset, SubsetPlan};
pub use weights::{default_weights, WeightMode};

pub(crate) use lower::LowerBlock;
pub(crate) use residual::ResidualProblem;

use crate::error::{shape_err, Error, Result};
use crate::hogp::{
    default_params, laplace_penalty, tgp_fit, tgp_flat_objective, PosteriorField, TgpConfig, TgpMask, TgpModel,
    TgpParams, TgpPosterior,
};
use crate::kernels::ard_gram;
use crate::optim::{grad_audit, minimize_projected, OptimConfig, TraceEntry};
use crate::tensalg::{kron, tucker_apply, DenseTensor, TuckerWeights};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Default cap on the entries of the low-rank factor used for unmatched inputs.
pub const DEFAULT_MAX_IMAGINARY_ENTRIES: usize = 30_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarConfig {
    pub low: TgpConfig,
    pub residual_optim: OptimConfig,
    /// Laplace prior scale on trainable residual coordinates.
    pub laplace: f64,
    pub weight_mode: WeightMode,
    /// Copy (and freeze) the low-fidelity latent coordinates into every
    /// residual. `None` shares whenever the output shapes agree.
    pub share_features: Option<bool>,
    /// Starting weights for every transition (default: [`default_weights`]).
    pub weight_init: Option<TuckerWeights>,
    /// Euclidean matching tolerance; `None` matches inputs exactly.
    pub match_tol: Option<f64>,
    pub max_imaginary_entries: usize,
}

impl Default for GarConfig {
    fn default() -> Self {
        Self {
            low: TgpConfig::default(),
            residual_optim: OptimConfig::default(),
            laplace: 0.0,
            weight_mode: WeightMode::Full,
            share_features: None,
            weight_init: None,
            match_tol: None,
            max_imaginary_entries: DEFAULT_MAX_IMAGINARY_ENTRIES,
        }
    }
}

/// Map from level `i` to level `i + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarTransition {
    pub weights: TuckerWeights,
    pub residual: TgpParams,
    pub mode: WeightMode,
    /// Residual latent coordinates are copies of the low ones and not trained.
    pub shared_features: bool,
    pub plan: SubsetPlan,
    pub trace: Vec<TraceEntry>,
}

impl GarTransition {
    fn mask(&self) -> TgpMask {
        TgpMask { coords: !self.shared_features, ..TgpMask::ALL }
    }
}

/// A fitted chain over every level of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarModel {
    /// Training data with all levels padded to a common mode count.
    pub data: MultiFidelityDataset,
    pub low: TgpModel,
    pub transitions: Vec<GarTransition>,
    pub max_imaginary_entries: usize,
}

fn level_err(level: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Level { .. } => e,
        other => Error::Level { level, source: Box::new(other) },
    }
}

impl GarModel {
    /// Assembles a model from given parameters (no fitting). Plans are built
    /// with exact matching.
    pub fn from_parts(
        dataset: &MultiFidelityDataset,
        low: TgpModel,
        weights: Vec<TuckerWeights>,
        residuals: Vec<TgpParams>,
    ) -> Result<Self> {
        let data = dataset.padded()?;
        if weights.len() + 1 != data.n_levels() || residuals.len() != weights.len() {
            return shape_err("one weight set and one residual per transition");
        }
        let transitions = weights
            .into_iter()
            .zip(residuals)
            .enumerate()
            .map(|(t, (w, r))| {
                Ok(GarTransition {
                    weights: w,
                    residual: r,
                    mode: WeightMode::Full,
                    shared_features: false,
                    plan: build_subset_plan(&data, t, None)?,
                    trace: Vec::new(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { data, low, transitions, max_imaginary_entries: DEFAULT_MAX_IMAGINARY_ENTRIES })
    }

    pub fn n_levels(&self) -> usize {
        self.transitions.len() + 1
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.data.levels[self.transitions.len()].output_shape().to_vec()
    }

    /// Raw residual data of a subset transition.
    fn residual_targets(&self, t: usize) -> Result<DenseTensor> {
        let tr = &self.transitions[t];
        if !tr.plan.is_subset() {
            return Err(Error::Unsupported(format!(
                "transition {t} has unmatched inputs but is not the top of the chain"
            )));
        }
        let lows: Vec<usize> = tr.plan.matched.iter().map(|&(_, l)| l).collect();
        let anchor = self.data.levels[t].y.select0(&lows);
        self.data.levels[t + 1].y.sub(&tucker_apply(&anchor, &tr.weights, 1)?)
    }

    /// Posterior components of level `level` given all data up to it.
    pub(crate) fn lower_block(&self, level: usize) -> Result<LowerBlock> {
        let mut block = LowerBlock::new(self.low.posterior()?, self.low.offset.clone());
        for t in 0..level {
            let tr = &self.transitions[t];
            block = block.push_through(&tr.weights)?;
            let r = self.residual_targets(t)?;
            block.add_component(TgpPosterior::new(&tr.residual, &self.data.levels[t + 1].x, &r)?);
        }
        Ok(block)
    }

    pub(crate) fn problem(&self, t: usize, lower: &LowerBlock, plan: &SubsetPlan) -> Result<ResidualProblem> {
        problem_for(&self.data, t, lower, plan, self.max_imaginary_entries)
    }
}

fn problem_for(
    data: &MultiFidelityDataset,
    t: usize,
    lower: &LowerBlock,
    plan: &SubsetPlan,
    max_entries: usize,
) -> Result<ResidualProblem> {
    let hi = &data.levels[t + 1];
    let lo = &data.levels[t];
    let imag = if plan.is_subset() {
        None
    } else {
        let xh = DMatrix::from_fn(plan.unmatched.len(), hi.x.ncols(), |i, j| hi.x[(plan.unmatched[i], j)]);
        Some(lower.imaginary(&xh, max_entries)?)
    };
    let w = lo.y.sample_len();
    let mut shape = vec![hi.n()];
    shape.extend_from_slice(lo.output_shape());
    let mut anchor = DenseTensor::zeros(&shape);
    for &(h, l) in &plan.matched {
        anchor.data_mut()[h * w..(h + 1) * w].copy_from_slice(&lo.y.data()[l * w..(l + 1) * w]);
    }
    if let Some(im) = &imag {
        for (p, &h) in plan.unmatched.iter().enumerate() {
            let v = im.mean.slice0(p).add(&lower.offset)?;
            anchor.data_mut()[h * w..(h + 1) * w].copy_from_slice(v.data());
        }
    }
    Ok(ResidualProblem { x: hi.x.clone(), y: hi.y.clone(), anchor, unmatched: plan.unmatched.clone(), imag })
}

/// Transition NLL and gradient over `[weights.., residual params..]`.
#[allow(clippy::too_many_arguments)]
fn transition_objective(
    prob: &ResidualProblem,
    mode: WeightMode,
    w0: &TuckerWeights,
    p0: &TgpParams,
    mask: &TgpMask,
    laplace: f64,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut pos = 0;
    let w = weights::unpack(mode, w0, theta, &mut pos);
    let nw = pos;
    let mut p = p0.clone();
    p.unpack(mask, theta, &mut pos);
    let st = prob.state(&w, &p)?;
    let (g, gw) = prob.grads(&w, &p, &st)?;
    let mut out = Vec::with_capacity(theta.len());
    weights::pack_grads(mode, &gw, &mut out);
    g.pack(&p, mask, &mut out);
    let mut nll = st.nll;
    if laplace > 0.0 && mask.coords {
        nll += laplace_penalty(&p, mask, laplace, &mut out, nw);
    }
    Ok((nll, out))
}

fn pack_transition(mode: WeightMode, w: &TuckerWeights, p: &TgpParams, mask: &TgpMask) -> Vec<f64> {
    let mut theta = Vec::new();
    weights::pack(mode, w, &mut theta);
    p.pack(mask, &mut theta);
    theta
}

fn fit_transition(model: &GarModel, t: usize, config: &GarConfig) -> Result<GarTransition> {
    let data = &model.data;
    let plan = build_subset_plan(data, t, config.match_tol)?;
    if !plan.is_subset() && t + 2 != data.n_levels() {
        return Err(Error::Unsupported(format!(
            "{} unmatched inputs below the top level; only the top transition may be non-subset",
            plan.unmatched.len()
        )));
    }
    let lower = model.lower_block(t)?;
    let prob = problem_for(data, t, &lower, &plan, config.max_imaginary_entries)?;
    let hi_shape = data.levels[t + 1].output_shape().to_vec();
    let lo_shape = data.levels[t].output_shape().to_vec();
    let w_init = match &config.weight_init {
        Some(w) => {
            if w.out_shape() != hi_shape || w.in_shape() != lo_shape {
                return shape_err(format!("initial weights map {:?} to {:?}", w.in_shape(), w.out_shape()));
            }
            w.clone()
        }
        None => default_weights(&hi_shape, &lo_shape),
    };
    let w0 = weights::prepare(config.weight_mode, w_init)?;
    let shared = config.share_features.unwrap_or(hi_shape == model.low.output_shape());
    if shared && hi_shape != model.low.output_shape() {
        return Err(Error::Unaligned("shared latent features need equal output shapes".into()));
    }
    let e0 = prob.y.sub(&tucker_apply(&prob.anchor, &w0, 1)?)?;
    let mut p0 = default_params(&prob.x, &e0, config.residual_optim.seed.wrapping_add(t as u64 + 1));
    if shared {
        p0.features = model.low.params.features.clone();
    }
    let mask = TgpMask { coords: !shared, ..TgpMask::ALL };
    let theta0 = pack_transition(config.weight_mode, &w0, &p0, &mask);
    let mode = config.weight_mode;
    let res = minimize_projected(
        |th| transition_objective(&prob, mode, &w0, &p0, &mask, config.laplace, th),
        |th| weights::project(mode, &w0, th),
        &theta0,
        &config.residual_optim,
    )?;
    let mut pos = 0;
    let w = weights::unpack(mode, &w0, &res.params, &mut pos);
    let mut residual = p0;
    residual.unpack(&mask, &res.params, &mut pos);
    Ok(GarTransition { weights: w, residual, mode, shared_features: shared, plan, trace: res.trace })
}

/// Fits the whole chain: the lowest level alone, then each transition with
/// everything below it frozen.
pub fn gar_fit_recursive(dataset: &MultiFidelityDataset, config: &GarConfig) -> Result<GarModel> {
    let data = dataset.padded()?;
    if data.n_levels() < 2 {
        return shape_err("at least two fidelity levels are needed");
    }
    let l0 = &data.levels[0];
    let low = tgp_fit(&l0.x, &l0.y, &config.low).map_err(level_err(0))?;
    let mut model = GarModel { data, low, transitions: Vec::new(), max_imaginary_entries: config.max_imaginary_entries };
    for t in 0..model.data.n_levels() - 1 {
        let tr = fit_transition(&model, t, config).map_err(level_err(t + 1))?;
        model.transitions.push(tr);
    }
    Ok(model)
}

/// Fits subset-structured data; refuses designs with unmatched inputs.
pub fn gar_fit_subset(dataset: &MultiFidelityDataset, config: &GarConfig) -> Result<GarModel> {
    let data = dataset.padded()?;
    for t in 0..data.n_levels().saturating_sub(1) {
        let plan = build_subset_plan(&data, t, config.match_tol)?;
        if !plan.is_subset() {
            return Err(Error::NotSubset { unmatched: plan.unmatched.len() });
        }
    }
    gar_fit_recursive(dataset, config)
}

/// Classic autoregression: every transition is `ρ·I` plus a residual.
pub fn ar_baseline_fit(dataset: &MultiFidelityDataset, config: &GarConfig) -> Result<GarModel> {
    let data = dataset.padded()?;
    if !data.aligned() {
        return Err(Error::Unaligned("autoregression needs equal output shapes at every level".into()));
    }
    let cfg = GarConfig { weight_mode: WeightMode::ScaledIdentity, ..config.clone() };
    gar_fit_recursive(&data, &cfg)
}

/// Negative log likelihood of the model's training data: the lowest TGP plus
/// every transition term (closed form for unmatched inputs at the top).
pub fn gar_nll(model: &GarModel) -> Result<f64> {
    let mut total = crate::hogp::tgp_nll(&model.low)?;
    for (t, tr) in model.transitions.iter().enumerate() {
        let lower = model.lower_block(t)?;
        let prob = model.problem(t, &lower, &tr.plan)?;
        total += prob.state(&tr.weights, &tr.residual)?.nll;
    }
    Ok(total)
}

/// Largest finite-difference gradient error over every stage objective,
/// evaluated at the fitted parameters.
pub fn gar_grad_audit(model: &GarModel, eps: f64) -> Result<f64> {
    let low = &model.low;
    let mut theta = Vec::new();
    low.params.pack(&TgpMask::ALL, &mut theta);
    let yc = low.centered_outputs()?;
    let mut worst = grad_audit(|t| tgp_flat_objective(&low.params, &TgpMask::ALL, 0.0, &low.x, &yc, t), &theta, eps)?;
    for (t, tr) in model.transitions.iter().enumerate() {
        let lower = model.lower_block(t)?;
        let prob = model.problem(t, &lower, &tr.plan)?;
        let mask = tr.mask();
        let theta = pack_transition(tr.mode, &tr.weights, &tr.residual, &mask);
        let err = grad_audit(
            |th| transition_objective(&prob, tr.mode, &tr.weights, &tr.residual, &mask, 0.0, th),
            &theta,
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Copies a column-major `rows × k` matrix into a `[k, shape..]` tensor.
fn columns_to_tensor(x: &DMatrix<f64>, shape: &[usize]) -> Result<DenseTensor> {
    let mut s = vec![x.ncols()];
    s.extend_from_slice(shape);
    DenseTensor::new(s, x.as_slice().to_vec())
}

fn tensor_to_columns(t: &DenseTensor) -> DMatrix<f64> {
    let k = t.shape()[0];
    let d = t.sample_len();
    DMatrix::from_row_slice(k, d, t.data()).transpose()
}

/// Predictions at the top level for each row of `x_star`; observation noise of
/// the top residual is included in the variance.
pub fn gar_predict_many(model: &GarModel, x_star: &DMatrix<f64>) -> Result<Vec<PosteriorField>> {
    if x_star.ncols() != model.data.input_dim() {
        return shape_err(format!("queries have {} inputs, model expects {}", x_star.ncols(), model.data.input_dim()));
    }
    let top = model.transitions.len() - 1;
    let tr = &model.transitions[top];
    let lower = model.lower_block(top)?;
    let prob = model.problem(top, &lower, &tr.plan)?;
    let st = prob.state(&tr.weights, &tr.residual)?;
    let w = &tr.weights;
    let hi_shape = model.output_shape();
    let noise = st.fac.sys.noise;
    let corr = st.corr;
    let resid = TgpPosterior { params: tr.residual.clone(), x: prob.x.clone(), fac: st.fac, alpha: st.beta };

    let lower_mean = lower.mean(x_star)?;
    let mut base = DenseTensor::zeros(lower_mean.shape());
    for i in 0..x_star.nrows() {
        let w_len = lower.offset.len();
        base.data_mut()[i * w_len..(i + 1) * w_len].copy_from_slice(lower.offset.data());
    }
    let mean_all = tucker_apply(&lower_mean.add(&base)?, w, 1)?.add(&resid.mean(x_star)?)?;

    // Q = (k*ᵀ ⊗ S^r) C_r⁻¹ F for every query at once: [k, n*, d_h..]
    let q_all = match &corr {
        Some(c) => {
            let mut z = DenseTensor::stack0(&c.z)?;
            z = z.mode_product(1, &resid.cross(x_star)?)?;
            for (m, s) in resid.fac.s.iter().enumerate() {
                z = z.mode_product(m + 2, s)?;
            }
            Some(z)
        }
        None => None,
    };

    (0..x_star.nrows())
        .map(|i| {
            let row = x_star.rows(i, 1).into_owned();
            let mut mean = mean_all.slice0(i);
            let mut var = resid.latent_cov(&row)?.diag()?;
            for term in lower.cov_terms(&row)? {
                var = var.add(&term.transform(w)?.diag()?)?;
            }
            if let (Some(c), Some(q_all), Some(im)) = (&corr, &q_all, &prob.imag) {
                let x = im.cross_factor(&lower, &row)?;
                let p = tensor_to_columns(&tucker_apply(&columns_to_tensor(&x, &lower.out_shape())?, w, 1)?);
                let k = p.ncols();
                let d = p.nrows();
                let q = DMatrix::from_fn(d, k, |e, a| q_all.data()[(a * x_star.nrows() + i) * d + e]);
                let pv = &p * &c.v;
                mean = mean.add(&DenseTensor::new(hi_shape.clone(), pv.as_slice().to_vec())?)?;
                let diff_t = c
                    .chol
                    .l()
                    .solve_lower_triangular(&(&p - &q).transpose())
                    .ok_or_else(|| Error::Conditioning("triangular solve failed".into()))?;
                let adj: Vec<f64> = (0..d)
                    .map(|e| diff_t.column(e).norm_squared() - p.row(e).norm_squared())
                    .collect();
                var = var.add(&DenseTensor::new(hi_shape.clone(), adj)?)?;
            }
            Ok(PosteriorField { mean, variance_diag: var.map(|v| v.max(0.0) + noise) })
        })
        .collect()
}

pub fn gar_predict(model: &GarModel, x_star: &[f64]) -> Result<PosteriorField> {
    let row = DMatrix::from_row_slice(1, x_star.len(), x_star);
    Ok(gar_predict_many(model, &row)?.remove(0))
}

/// Default cap on the stacked dimension of the dense oracle.
pub const DENSE_CAP: usize = 400;

/// Accumulated map from component `s` to level `a` (`s ≤ a`).
pub(crate) fn chain_map(model: &GarModel, s: usize, a: usize) -> Result<DMatrix<f64>> {
    let shape = model.data.levels[s].output_shape().to_vec();
    let mut w = TuckerWeights::identity(&shape);
    for t in s..a {
        w = model.transitions[t].weights.compose(&w)?;
    }
    Ok(w.kron())
}

/// Dense joint covariance of all stacked level outputs and the outputs minus
/// their prior means.
pub(crate) fn dense_joint(model: &GarModel, cap: usize) -> Result<(DMatrix<f64>, nalgebra::DVector<f64>)> {
    let levels = &model.data.levels;
    let total: usize = levels.iter().map(|l| l.y.len()).sum();
    if total > cap {
        return Err(Error::TooLarge(format!("dense joint of dimension {total} exceeds cap {cap}")));
    }
    let tau = levels.len();
    let params: Vec<&TgpParams> =
        std::iter::once(&model.low.params).chain(model.transitions.iter().map(|t| &t.residual)).collect();
    let starts: Vec<usize> = levels
        .iter()
        .scan(0, |acc, l| {
            let s = *acc;
            *acc += l.y.len();
            Some(s)
        })
        .collect();
    let mut sigma = DMatrix::zeros(total, total);
    for a in 0..tau {
        for b in 0..tau {
            let (xa, xb) = (&levels[a].x, &levels[b].x);
            let delta = DMatrix::from_fn(xa.nrows(), xb.nrows(), |i, j| if xa.row(i) == xb.row(j) { 1.0 } else { 0.0 });
            let mut block = DMatrix::zeros(levels[a].y.len(), levels[b].y.len());
            for (s, p) in params.iter().enumerate().take(a.min(b) + 1) {
                let ma = chain_map(model, s, a)?;
                let mb = chain_map(model, s, b)?;
                let s_kron = TuckerWeights::new(p.output_covs()?).kron();
                let k = ard_gram(&p.input_kernel, xa, xb)?;
                block += kron(&k, &(&ma * s_kron * mb.transpose())) + kron(&delta, &(&ma * mb.transpose())) * p.noise();
            }
            sigma.view_mut((starts[a], starts[b]), block.shape()).copy_from(&block);
        }
    }
    let mut resid = Vec::with_capacity(total);
    let mut offset = model.low.offset.clone();
    for (a, l) in levels.iter().enumerate() {
        if a > 0 {
            offset = tucker_apply(&offset, &model.transitions[a - 1].weights, 0)?;
        }
        for (i, v) in l.y.data().iter().enumerate() {
            resid.push(v - offset.data()[i % offset.len()]);
        }
    }
    Ok(((&sigma + sigma.transpose()) * 0.5, nalgebra::DVector::from_vec(resid)))
}

/// Negative log density of all stacked level outputs under the dense joint
/// covariance of the chain. Exponential-cost oracle for small problems.
pub fn gar_joint_nll_dense(model: &GarModel, cap: usize) -> Result<f64> {
    let (sigma, r) = dense_joint(model, cap)?;
    let total = r.len();
    let chol = sigma.cholesky().ok_or_else(|| Error::Conditioning("dense joint covariance not positive definite".into()))?;
    let quad = r.dot(&chol.solve(&r));
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(0.5 * (quad + logdet + total as f64 * LN_2PI))
}
